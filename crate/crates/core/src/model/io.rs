//! Model files: an `FCNW` weight file plus a JSON sidecar with the
//! [`ModelConfig`], written next to it with a `.json` extension.
//!
//! Tensor names follow the Keras MobileNet layer names so converted
//! checkpoints can be imported: `conv1/kernel`, `conv1_bn/gamma`,
//! `conv_dw_1/depthwise_kernel`, `conv_pw_1_bn/moving_variance`,
//! `head/kernel`, `head/bias`. Kernels are stored `(C_out, C_in, kh, kw)`,
//! depthwise kernels `(C, kh, kw)`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{FcnModel, LayerKind, ModelConfig};
use crate::error::{Error, Result};
use crate::nncore::{load_weights, save_weights, NamedTensors, Tensor};

fn kernel_name(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::Depthwise => "depthwise_kernel",
        LayerKind::Standard | LayerKind::Pointwise => "kernel",
    }
}

/// `model.fcnw` -> `model.json`.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

impl FcnModel {
    /// All persisted tensors in a stable order.
    pub fn named_tensors(&self) -> NamedTensors {
        let mut out = Vec::new();
        for l in &self.layers {
            let bn = format!("{}_bn", l.name);
            let c = l.bn.running_mean.len();
            out.push((format!("{}/{}", l.name, kernel_name(l.kind)), l.kernel.value.clone()));
            out.push((format!("{bn}/gamma"), l.bn.gamma.value.clone()));
            out.push((format!("{bn}/beta"), l.bn.beta.value.clone()));
            out.push((
                format!("{bn}/moving_mean"),
                Tensor::new(vec![c], l.bn.running_mean.clone()).expect("channel vector"),
            ));
            out.push((
                format!("{bn}/moving_variance"),
                Tensor::new(vec![c], l.bn.running_var.clone()).expect("channel vector"),
            ));
        }
        out.push(("head/kernel".into(), self.head_weight.value.clone()));
        out.push(("head/bias".into(), self.head_bias.value.clone()));
        out
    }

    /// Replaces every tensor by name. Missing, unknown or misshapen tensors
    /// are schema errors naming the tensor.
    pub fn assign_tensors(&mut self, tensors: NamedTensors) -> Result<()> {
        let mut by_name: HashMap<String, Tensor> = HashMap::with_capacity(tensors.len());
        for (name, t) in tensors {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(Error::Schema(format!("tensor {name} appears twice")));
            }
        }
        let mut take = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Schema(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Schema(format!(
                    "tensor {name} has shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        for l in &mut self.layers {
            let bn = format!("{}_bn", l.name);
            let c = [l.bn.running_mean.len()];
            let kshape = l.kernel.value.shape().to_vec();
            l.kernel.value = take(format!("{}/{}", l.name, kernel_name(l.kind)), &kshape)?;
            l.bn.gamma.value = take(format!("{bn}/gamma"), &c)?;
            l.bn.beta.value = take(format!("{bn}/beta"), &c)?;
            l.bn.running_mean = take(format!("{bn}/moving_mean"), &c)?.into_data();
            l.bn.running_var = take(format!("{bn}/moving_variance"), &c)?.into_data();
            if let Some(i) = l.bn.running_var.iter().position(|&v| v < 0.0) {
                return Err(Error::Schema(format!("tensor {bn}/moving_variance[{i}] is negative")));
            }
        }
        let hshape = self.head_weight.value.shape().to_vec();
        self.head_weight.value = take("head/kernel".into(), &hshape)?;
        self.head_bias.value = take("head/bias".into(), &[2])?;
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::Schema(format!("unexpected tensor {extra}")));
        }
        for p in self.parameters_mut() {
            let shape = p.value.shape().to_vec();
            p.gradient = Tensor::zeros(&shape);
            p.rms_accumulator = Tensor::zeros(&shape);
        }
        Ok(())
    }

    pub fn save(&self, weights_path: impl AsRef<Path>) -> Result<()> {
        let path = weights_path.as_ref();
        save_weights(path, &self.named_tensors())?;
        let sidecar = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.config)?;
        fs::write(&sidecar, json + "\n").map_err(|e| Error::io(&sidecar, e))
    }

    /// Loads weights and their sidecar config.
    pub fn load(weights_path: impl AsRef<Path>) -> Result<Self> {
        let path = weights_path.as_ref();
        let sidecar = sidecar_path(path);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let config: ModelConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", sidecar.display())))?;
        Self::load_with_config(path, config)
    }

    /// Loads a weight file against an explicit config, e.g. to import
    /// externally converted backbone weights.
    pub fn load_with_config(weights_path: impl AsRef<Path>, config: ModelConfig) -> Result<Self> {
        let mut model = FcnModel::new(config, 0)?;
        model.assign_tensors(load_weights(weights_path)?)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FeatureMap;

    #[test]
    fn save_load_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fcnw");
        let mut m = FcnModel::new(ModelConfig::with_width(0.25), 3).unwrap();
        m.layers[2].bn.running_mean[0] = 0.125;
        m.save(&path).unwrap();
        assert!(path.with_extension("json").exists());
        let back = FcnModel::load(&path).unwrap();
        assert_eq!(back, m);
        let map = FeatureMap::new(64, 50, (0..3200).map(|i| (i % 17) as f32).collect()).unwrap();
        assert_eq!(back.predict(&map).unwrap(), m.predict(&map).unwrap());
    }

    #[test]
    fn mismatched_width_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fcnw");
        FcnModel::new(ModelConfig::with_width(0.25), 3).unwrap().save(&path).unwrap();
        let err = FcnModel::load_with_config(&path, ModelConfig::with_width(0.5)).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Schema(_)));
        assert!(msg.contains("conv1/kernel"), "{msg}");
    }

    #[test]
    fn missing_and_extra_tensors_are_rejected() {
        let mut m = FcnModel::new(ModelConfig::with_width(0.25), 3).unwrap();
        let mut t = m.named_tensors();
        t.retain(|(n, _)| n != "head/bias");
        let err = m.clone().assign_tensors(t).unwrap_err().to_string();
        assert!(err.contains("head/bias"), "{err}");
        let mut t = m.named_tensors();
        t.push(("bogus".into(), Tensor::zeros(&[1])));
        let err = m.assign_tensors(t).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }
}
