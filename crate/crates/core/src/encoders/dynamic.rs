use ndarray::{Array1, Axis};
use rand::Rng;

use super::metadata::{MetadataEncoding, METADATA_DIM};
use super::nn::{gelu, gelu_backward, join, Linear, Mat, Module, Param};
use crate::error::{Error, Result};

/// Shallow MLP mapping encoded metadata to an additive offset in embedding
/// space. GELU between layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicEncoder {
    pub layers: Vec<Linear>,
}

pub struct DynamicCache {
    inputs: Vec<Mat>,
    pre: Vec<Mat>,
}

impl DynamicEncoder {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, hidden: &[usize], out_dim: usize) -> Self {
        let mut dims = vec![METADATA_DIM];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        DynamicEncoder {
            layers: dims.windows(2).map(|w| Linear::new(rng, w[0], w[1], true)).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.value.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").weight.value.ncols()
    }

    fn check_input(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.in_dim() {
            return Err(Error::Config(format!(
                "dynamic encoder expects {} features, got {}",
                self.in_dim(),
                features.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, meta: &MetadataEncoding) -> Result<(Array1<f64>, DynamicCache)> {
        self.check_input(&meta.features)?;
        let mut x = Array1::from(meta.features.to_vec()).insert_axis(Axis(0));
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&x);
            inputs.push(x);
            x = if i < last { gelu(&z) } else { z.clone() };
            pre.push(z);
        }
        Ok((x.index_axis_move(Axis(0), 0), DynamicCache { inputs, pre }))
    }

    pub fn backward(&mut self, cache: &DynamicCache, d_out: &Array1<f64>) {
        let mut d = d_out.view().insert_axis(Axis(0)).to_owned();
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i < last {
                d = gelu_backward(&cache.pre[i], &d);
            }
            d = self.layers[i].backward(&cache.inputs[i], &d);
        }
    }
}

impl Module for DynamicEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::metadata::encode_metadata;
    use crate::encoders::nn::gradcheck::check;
    use crate::geodata::{CaptureTime, GeoLocation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn meta(month: u32, hour: u32) -> MetadataEncoding {
        encode_metadata(GeoLocation::new(40.0, -3.7).unwrap(), CaptureTime::new(2011, month, 3, hour).unwrap())
    }

    #[test]
    fn zero_weights_give_zero_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut enc = DynamicEncoder::new(&mut rng, &[16, 16], 8);
        enc.visit_mut("", &mut |_, p| p.value.fill(0.0));
        let (e, _) = enc.forward(&meta(7, 12)).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distinct_times_distinct_outputs_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = DynamicEncoder::new(&mut rng, &[32, 32], 8);
        let a = enc.forward(&meta(1, 8)).unwrap().0;
        let b = enc.forward(&meta(7, 23)).unwrap().0;
        assert_ne!(a, b);
        assert_eq!(a, enc.forward(&meta(1, 8)).unwrap().0);
    }

    #[test]
    fn gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut enc = DynamicEncoder::new(&mut rng, &[6, 5], 4);
        enc.visit_mut("", &mut |n, p| {
            if n.ends_with("bias") {
                p.value.fill(0.1);
            }
        });
        let m = meta(3, 4);
        check(
            &enc,
            &Mat::zeros((1, 1)),
            |e, _| e.forward(&m).unwrap().0.insert_axis(Axis(0)),
            |e, _, dy| {
                let (_, c) = e.forward(&m).unwrap();
                e.backward(&c, &dy.row(0).to_owned());
                Mat::zeros((0, 0))
            },
        );
    }
}
