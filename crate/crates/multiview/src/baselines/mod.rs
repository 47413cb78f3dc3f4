//! Linear reference methods: two-view CCA, the multi-view discriminant
//! projection, and a concatenation + softmax classifier.

pub mod cca;
pub mod concat;
pub mod linalg;
pub mod mvda;

pub use cca::{cca_fit, default_ridge, CcaSolution};
pub use concat::{concat_softmax_fit, ConcatSoftmax, ConcatTrainOpts};
pub use mvda::{mvda_fit, MvdaSolution};
