//! Model checkpoint container.
//!
//! Layout: magic `MLCKPT01`, a textual manifest (layer order, hyperparameters
//! and tensor shapes), then the raw little-endian f32 weight arrays in
//! manifest order. Loading reconstructs values exactly as stored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::nn::layer::{Layer, Stack};
use crate::nn::ops::Pad;
use crate::nn::tensor::Tensor;
use crate::nn::NnError;

const MAGIC: &[u8; 8] = b"MLCKPT01";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointLayer {
    pub kind: String,
    pub hyper: Vec<(String, String)>,
    pub tensors: Vec<CheckpointTensor>,
}

impl CheckpointLayer {
    pub fn bare(kind: &str) -> Self {
        Self { kind: kind.to_string(), hyper: Vec::new(), tensors: Vec::new() }
    }

    fn hyper_get(&self, key: &str) -> Result<&str, NnError> {
        self.hyper
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| NnError::Checkpoint(format!("layer {} missing hyper {}", self.kind, key)))
    }

    fn tensor_get(&self, name: &str) -> Result<&CheckpointTensor, NnError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| NnError::Checkpoint(format!("layer {} missing tensor {}", self.kind, name)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: String,
    pub meta: Vec<(String, String)>,
    pub layers: Vec<CheckpointLayer>,
}

impl Checkpoint {
    pub fn new(model: &str) -> Self {
        Self { model: model.to_string(), meta: Vec::new(), layers: Vec::new() }
    }

    pub fn meta_get(&self, key: &str) -> Result<&str, NnError> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| NnError::Checkpoint(format!("missing meta key {}", key)))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize, NnError> {
        self.meta_get(key)?
            .parse()
            .map_err(|_| NnError::Checkpoint(format!("meta key {} is not an integer", key)))
    }

    pub fn manifest(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("model\t{}\n", self.model));
        for (k, v) in &self.meta {
            out.push_str(&format!("meta\t{}\t{}\n", k, v));
        }
        for layer in &self.layers {
            out.push_str(&format!("layer\t{}\n", layer.kind));
            for (k, v) in &layer.hyper {
                out.push_str(&format!("hyper\t{}\t{}\n", k, v));
            }
            for t in &layer.tensors {
                let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
                out.push_str(&format!("tensor\t{}\t{}\n", t.name, dims.join("x")));
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        let manifest = self.manifest();
        w.write_u64::<LittleEndian>(manifest.len() as u64)?;
        w.write_all(manifest.as_bytes())?;
        for layer in &self.layers {
            for t in &layer.tensors {
                for &v in &t.data {
                    w.write_f32::<LittleEndian>(v)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, NnError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let mlen = r.read_u64::<LittleEndian>()? as usize;
        let mut mbuf = vec![0u8; mlen];
        r.read_exact(&mut mbuf)?;
        let manifest =
            String::from_utf8(mbuf).map_err(|_| NnError::Checkpoint("manifest is not UTF-8".into()))?;

        let mut ckpt = Checkpoint::new("");
        let mut saw_end = false;
        for line in manifest.lines() {
            let parts: Vec<&str> = line.split('\t').collect();
            match parts.as_slice() {
                ["model", name] => ckpt.model = name.to_string(),
                ["meta", k, v] => ckpt.meta.push((k.to_string(), v.to_string())),
                ["layer", kind] => ckpt.layers.push(CheckpointLayer::bare(kind)),
                ["hyper", k, v] => {
                    let layer = ckpt
                        .layers
                        .last_mut()
                        .ok_or_else(|| NnError::Checkpoint("hyper before any layer".into()))?;
                    layer.hyper.push((k.to_string(), v.to_string()));
                }
                ["tensor", name, dims] => {
                    let layer = ckpt
                        .layers
                        .last_mut()
                        .ok_or_else(|| NnError::Checkpoint("tensor before any layer".into()))?;
                    let shape: Result<Vec<usize>, _> = dims.split('x').map(|d| d.parse()).collect();
                    let shape = shape.map_err(|_| NnError::Checkpoint(format!("bad shape {}", dims)))?;
                    layer.tensors.push(CheckpointTensor { name: name.to_string(), shape, data: Vec::new() });
                }
                ["end"] => saw_end = true,
                _ => return Err(NnError::Checkpoint(format!("bad manifest line: {}", line))),
            }
        }
        if !saw_end {
            return Err(NnError::Checkpoint("manifest missing end marker".into()));
        }
        for layer in &mut ckpt.layers {
            for t in &mut layer.tensors {
                let n: usize = t.shape.iter().product();
                let mut data = vec![0f32; n];
                r.read_f32_into::<LittleEndian>(&mut data)?;
                t.data = data;
            }
        }
        Ok(ckpt)
    }
}

// ---------------------------------------------------------------------------
// Stack <-> checkpoint layers
// ---------------------------------------------------------------------------

fn tensor_to_ckpt(name: &str, t: &Tensor) -> CheckpointTensor {
    CheckpointTensor {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|&v| v as f32).collect(),
    }
}

fn tensor_from_ckpt(t: &CheckpointTensor) -> Tensor {
    Tensor::from_vec(&t.shape, t.data.iter().map(|&v| v as f64).collect())
}

fn pad_str(p: Pad) -> &'static str {
    match p {
        Pad::Same => "same",
        Pad::Valid => "valid",
    }
}

fn pad_parse(s: &str) -> Result<Pad, NnError> {
    match s {
        "same" => Ok(Pad::Same),
        "valid" => Ok(Pad::Valid),
        other => Err(NnError::Checkpoint(format!("unknown pad {}", other))),
    }
}

pub fn stack_to_checkpoint_layers(stack: &Stack) -> Vec<CheckpointLayer> {
    stack
        .layers
        .iter()
        .map(|layer| match layer {
            Layer::Conv { weight, bias, stride, pad } => CheckpointLayer {
                kind: "conv".into(),
                hyper: vec![("stride".into(), stride.to_string()), ("pad".into(), pad_str(*pad).into())],
                tensors: vec![tensor_to_ckpt("weight", weight), tensor_to_ckpt("bias", bias)],
            },
            Layer::ConvT { weight, bias, stride, pad } => CheckpointLayer {
                kind: "conv_t".into(),
                hyper: vec![("stride".into(), stride.to_string()), ("pad".into(), pad_str(*pad).into())],
                tensors: vec![tensor_to_ckpt("weight", weight), tensor_to_ckpt("bias", bias)],
            },
            Layer::Dense { weight, bias } => CheckpointLayer {
                kind: "dense".into(),
                hyper: Vec::new(),
                tensors: vec![tensor_to_ckpt("weight", weight), tensor_to_ckpt("bias", bias)],
            },
            Layer::BatchNorm { gamma, beta, running_mean, running_var, momentum, eps } => CheckpointLayer {
                kind: "batchnorm".into(),
                hyper: vec![("momentum".into(), momentum.to_string()), ("eps".into(), eps.to_string())],
                tensors: vec![
                    tensor_to_ckpt("gamma", gamma),
                    tensor_to_ckpt("beta", beta),
                    tensor_to_ckpt("running_mean", running_mean),
                    tensor_to_ckpt("running_var", running_var),
                ],
            },
            Layer::Relu => CheckpointLayer::bare("relu"),
            Layer::Sigmoid => CheckpointLayer::bare("sigmoid"),
            Layer::MaxPool2 => CheckpointLayer::bare("maxpool2"),
            Layer::Upsample2 => CheckpointLayer::bare("upsample2"),
            Layer::Flatten => CheckpointLayer::bare("flatten"),
            Layer::Reshape { channels, height, width } => CheckpointLayer {
                kind: "reshape".into(),
                hyper: vec![
                    ("channels".into(), channels.to_string()),
                    ("height".into(), height.to_string()),
                    ("width".into(), width.to_string()),
                ],
                tensors: Vec::new(),
            },
            Layer::GlobalAvgPool => CheckpointLayer::bare("global_avg_pool"),
        })
        .collect()
}

pub fn stack_from_checkpoint_layers(layers: &[CheckpointLayer]) -> Result<Stack, NnError> {
    let mut out = Vec::with_capacity(layers.len());
    for cl in layers {
        let layer = match cl.kind.as_str() {
            "conv" | "conv_t" => {
                let stride: usize = cl
                    .hyper_get("stride")?
                    .parse()
                    .map_err(|_| NnError::Checkpoint("bad stride".into()))?;
                let pad = pad_parse(cl.hyper_get("pad")?)?;
                let weight = tensor_from_ckpt(cl.tensor_get("weight")?).with_grad();
                let bias = tensor_from_ckpt(cl.tensor_get("bias")?).with_grad();
                if cl.kind == "conv" {
                    Layer::Conv { weight, bias, stride, pad }
                } else {
                    Layer::ConvT { weight, bias, stride, pad }
                }
            }
            "dense" => Layer::Dense {
                weight: tensor_from_ckpt(cl.tensor_get("weight")?).with_grad(),
                bias: tensor_from_ckpt(cl.tensor_get("bias")?).with_grad(),
            },
            "batchnorm" => {
                let running_var = tensor_from_ckpt(cl.tensor_get("running_var")?);
                if running_var.data().iter().any(|&v| v <= 0.0) {
                    return Err(NnError::Checkpoint("batchnorm running_var must be positive".into()));
                }
                Layer::BatchNorm {
                    gamma: tensor_from_ckpt(cl.tensor_get("gamma")?).with_grad(),
                    beta: tensor_from_ckpt(cl.tensor_get("beta")?).with_grad(),
                    running_mean: tensor_from_ckpt(cl.tensor_get("running_mean")?),
                    running_var,
                    momentum: cl
                        .hyper_get("momentum")?
                        .parse()
                        .map_err(|_| NnError::Checkpoint("bad momentum".into()))?,
                    eps: cl.hyper_get("eps")?.parse().map_err(|_| NnError::Checkpoint("bad eps".into()))?,
                }
            }
            "relu" => Layer::Relu,
            "sigmoid" => Layer::Sigmoid,
            "maxpool2" => Layer::MaxPool2,
            "upsample2" => Layer::Upsample2,
            "flatten" => Layer::Flatten,
            "global_avg_pool" => Layer::GlobalAvgPool,
            "reshape" => Layer::Reshape {
                channels: cl
                    .hyper_get("channels")?
                    .parse()
                    .map_err(|_| NnError::Checkpoint("bad channels".into()))?,
                height: cl
                    .hyper_get("height")?
                    .parse()
                    .map_err(|_| NnError::Checkpoint("bad height".into()))?,
                width: cl
                    .hyper_get("width")?
                    .parse()
                    .map_err(|_| NnError::Checkpoint("bad width".into()))?,
            },
            other => return Err(NnError::Checkpoint(format!("unknown layer kind {}", other))),
        };
        out.push(layer);
    }
    Ok(Stack::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng::rng_for;

    #[test]
    fn roundtrip_is_value_exact() {
        let mut rng = rng_for(2, &[42]);
        let stack = Stack::new(vec![
            Layer::conv(3, 4, 3, &mut rng),
            Layer::batchnorm(4),
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Flatten,
            Layer::dense(16, 2, &mut rng),
        ]);
        let mut ckpt = Checkpoint::new("test-model");
        ckpt.meta.push(("input_size".into(), "4".into()));
        ckpt.layers = stack_to_checkpoint_layers(&stack);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, loaded);

        // Re-saving the loaded checkpoint must produce identical bytes.
        let path2 = dir.path().join("model2.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        // And the rebuilt stack round-trips to the same layers.
        let rebuilt = stack_from_checkpoint_layers(&loaded.layers).unwrap();
        assert_eq!(stack_to_checkpoint_layers(&rebuilt), loaded.layers);
    }

    #[test]
    fn manifest_lists_layer_order_and_shapes() {
        let mut rng = rng_for(2, &[43]);
        let stack = Stack::new(vec![Layer::conv(3, 8, 3, &mut rng), Layer::Relu]);
        let mut ckpt = Checkpoint::new("m");
        ckpt.layers = stack_to_checkpoint_layers(&stack);
        let m = ckpt.manifest();
        assert!(m.contains("layer\tconv"));
        assert!(m.contains("tensor\tweight\t8x3x3x3"));
        assert!(m.contains("layer\trelu"));
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxx").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
