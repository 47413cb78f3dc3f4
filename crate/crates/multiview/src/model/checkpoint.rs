//! Binary model checkpoint: version tag, architecture header, named
//! parameter matrices as row-major 64-bit little-endian floats, batch-norm
//! running statistics, the final view weights, and the feature standardizer.
//! Round-trips are bit-exact.

use super::{Arch, ModelSpec, MvNnBiIn};
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::fusion::ViewWeights;
use crate::numerics::matrix::Matrix;
use crate::numerics::ops::BnState;
use crate::numerics::Rng;
use std::path::Path;

const MAGIC: &[u8; 8] = b"MVCKPT1\0";

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn u32s(&mut self, vs: &[usize]) {
        self.u32(vs.len());
        for &v in vs {
            self.u32(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data("checkpoint truncated".into()));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Data("bad name in checkpoint".into()))
    }
    fn u32s(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        (0..n).map(|_| self.u32()).collect()
    }
}

fn arch_tag(arch: Arch) -> u8 {
    match arch {
        Arch::Full => 0,
        Arch::NoBilinear => 1,
        Arch::HeadOnly => 2,
    }
}

fn arch_from_tag(tag: u8) -> Result<Arch> {
    match tag {
        0 => Ok(Arch::Full),
        1 => Ok(Arch::NoBilinear),
        2 => Ok(Arch::HeadOnly),
        other => Err(Error::Data(format!("unknown architecture tag {other}"))),
    }
}

pub fn save(
    path: &Path,
    model: &MvNnBiIn<f64>,
    weights: &ViewWeights,
    standardizer: Option<&Standardizer>,
) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    let spec = &model.spec;
    w.u8(arch_tag(spec.arch));
    w.u8(spec.bilinear_batchnorm as u8);
    w.u32(spec.num_views);
    w.u32(spec.num_classes);
    w.u32(spec.d);
    w.u32(spec.d_b);
    w.u32s(&spec.view_dims);
    w.u32s(&spec.fv_hidden);
    w.u32s(&spec.head_hidden);

    w.u32(model.params.len());
    for (_, name, m) in model.params.iter() {
        w.str(name);
        w.u32(m.rows());
        w.u32(m.cols());
        w.f64s(m.as_slice());
    }

    w.u32(model.bn_states.len());
    for state in &model.bn_states {
        w.u32(state.mean.len());
        w.f64s(&state.mean);
        w.f64s(&state.var);
    }

    w.u32(weights.alpha.len());
    w.f64s(&weights.alpha);
    w.f64(weights.gamma);
    w.u32(weights.s);

    match standardizer {
        Some(st) => {
            w.u8(1);
            w.u32(st.views.len());
            for view in &st.views {
                w.u32(view.mean.len());
                w.f64s(&view.mean);
                w.f64s(&view.std);
            }
        }
        None => w.u8(0),
    }

    std::fs::write(path, w.buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(MvNnBiIn<f64>, ViewWeights, Option<Standardizer>)> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Data(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let arch = arch_from_tag(r.u8()?)?;
    let bilinear_batchnorm = r.u8()? != 0;
    let num_views = r.u32()?;
    let num_classes = r.u32()?;
    let d = r.u32()?;
    let d_b = r.u32()?;
    let view_dims = r.u32s()?;
    let fv_hidden = r.u32s()?;
    let head_hidden = r.u32s()?;
    let spec = ModelSpec {
        arch,
        num_views,
        num_classes,
        view_dims,
        fv_hidden,
        d,
        d_b,
        head_hidden,
        bilinear_batchnorm,
    };

    // rebuild the skeleton, then overwrite every parameter by name
    let mut model = MvNnBiIn::<f64>::init(&spec, &mut Rng::new(0))?;

    let n_params = r.u32()?;
    if n_params != model.params.len() {
        return Err(Error::Data(format!(
            "checkpoint has {n_params} parameters, architecture implies {}",
            model.params.len()
        )));
    }
    let ids: Vec<_> = model
        .params
        .iter()
        .map(|(id, name, m)| (id, name.to_string(), m.shape()))
        .collect();
    for (id, expected_name, expected_shape) in ids {
        let name = r.str()?;
        let rows = r.u32()?;
        let cols = r.u32()?;
        if name != expected_name || (rows, cols) != expected_shape {
            return Err(Error::Data(format!(
                "checkpoint parameter {name} ({rows}x{cols}) does not match expected {expected_name} {expected_shape:?}"
            )));
        }
        let data = r.f64s(rows * cols)?;
        *model.params.value_mut(id) = Matrix::from_vec(rows, cols, data)?;
    }

    let n_states = r.u32()?;
    if n_states != model.bn_states.len() {
        return Err(Error::Data(
            "checkpoint batch-norm state count mismatch".into(),
        ));
    }
    for idx in 0..n_states {
        let width = r.u32()?;
        if width != model.bn_states[idx].mean.len() {
            return Err(Error::Data("checkpoint batch-norm width mismatch".into()));
        }
        model.bn_states[idx] = BnState {
            mean: r.f64s(width)?,
            var: r.f64s(width)?,
        };
    }

    let m = r.u32()?;
    let alpha = r.f64s(m)?;
    let gamma = r.f64()?;
    let s = r.u32()?;
    let weights = ViewWeights { alpha, gamma, s };

    let standardizer = if r.u8()? == 1 {
        let n_views = r.u32()?;
        let mut views = Vec::with_capacity(n_views);
        for _ in 0..n_views {
            let dim = r.u32()?;
            views.push(crate::data::ViewStats {
                mean: r.f64s(dim)?,
                std: r.f64s(dim)?,
            });
        }
        Some(Standardizer { views })
    } else {
        None
    };

    Ok((model, weights, standardizer))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let spec = ModelSpec {
            arch: Arch::Full,
            num_views: 3,
            num_classes: 4,
            view_dims: vec![3, 5, 4],
            fv_hidden: vec![6],
            d: 4,
            d_b: 2,
            head_hidden: vec![5],
            bilinear_batchnorm: true,
        };
        let mut model = MvNnBiIn::<f64>::init(&spec, &mut Rng::new(41)).unwrap();
        // drive batch norm stats away from the defaults
        let mut rng = Rng::new(42);
        let views: Vec<Matrix<f64>> = spec
            .view_dims
            .iter()
            .map(|&dv| rng.matrix_normal(8, dv, 1.0))
            .collect();
        model.forward_train(&views).unwrap();

        let weights = ViewWeights {
            alpha: vec![0.25, 0.75, 0.0],
            gamma: 3.5,
            s: 2,
        };
        let st = Standardizer {
            views: vec![
                crate::data::ViewStats {
                    mean: vec![0.1, -0.2, 0.3],
                    std: vec![1.0, 2.0, 0.5],
                },
                crate::data::ViewStats {
                    mean: vec![0.0; 5],
                    std: vec![1.0; 5],
                },
                crate::data::ViewStats {
                    mean: vec![9.0; 4],
                    std: vec![0.25; 4],
                },
            ],
        };

        let dir = std::env::temp_dir().join(format!("mv_ckpt_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        save(&path, &model, &weights, Some(&st)).unwrap();
        let (loaded, w2, st2) = load(&path).unwrap();

        assert_eq!(loaded.spec, model.spec);
        for ((_, _, a), (_, _, b)) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(a.as_slice(), b.as_slice());
        }
        for (a, b) in model.bn_states.iter().zip(&loaded.bn_states) {
            assert_eq!(a, b);
        }
        assert_eq!(w2, weights);
        let st2 = st2.unwrap();
        assert_eq!(st2.views.len(), 3);
        assert_eq!(st2.views[0].mean, st.views[0].mean);
        assert_eq!(st2.views[2].std, st.views[2].std);

        // saving the loaded model reproduces the file byte for byte
        let path2 = dir.join("model2.ckpt");
        save(&path2, &loaded, &w2, Some(&st2)).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn load_rejects_non_checkpoints() {
        let dir = std::env::temp_dir().join(format!("mv_ckpt_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
