//! End-to-end segmentation model: encoder, decoder, heads, and the loss.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{FptDecoder, FPTConfig, AUX_LOSS_WEIGHT};
use crate::encoder::{PgtEncoder, PGTConfig, STAGES};
use crate::error::{Error, Result};
use crate::nn::{Init, ParamFn};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;

/// Encoder and decoder configuration of one model. The decoder lateral
/// widths are derived from the encoder dims, so the pair is always
/// consistent by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: PGTConfig,
    pub decoder: FPTConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }

    /// Micro configuration used by the end-to-end gradient check: under
    /// 100k parameters, legal on 32x32 inputs.
    pub fn micro(num_classes: usize) -> Self {
        ModelConfig {
            encoder: PGTConfig::custom(8, [1, 1, 1, 1], [4, 4, 1, 1], [1, 2, 4, 8])
                .expect("micro encoder config is valid"),
            decoder: FPTConfig {
                embed_dim: 8,
                depths: [1, 1, 1],
                // Stride-32 and stride-16 maps of a 32x32 input are 1x1 and
                // 2x2; reduction there would leave no key/value tokens.
                sr_ratios: [1, 1, 2],
                fusion: crate::decoder::FusionMode::Sum,
                num_classes,
            },
        }
    }

    /// Slightly larger micro configuration for the toy training loop,
    /// legal on 64x64 inputs.
    pub fn toy(num_classes: usize) -> Self {
        ModelConfig {
            encoder: PGTConfig::custom(8, [1, 1, 1, 1], [16, 4, 1, 1], [1, 2, 4, 8])
                .expect("toy encoder config is valid"),
            decoder: FPTConfig {
                embed_dim: 16,
                depths: [1, 1, 1],
                sr_ratios: [1, 2, 2],
                fusion: crate::decoder::FusionMode::Sum,
                num_classes,
            },
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::format(e.to_string(), None))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(s).map_err(|e| Error::format(e.to_string(), None))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Main logits plus the per-branch auxiliary logits (train mode only).
#[derive(Debug, Clone)]
pub struct FtnOutput<T> {
    pub logits: Tensor<T>,
    pub aux_logits: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct FtnModel<T> {
    pub config: ModelConfig,
    pub encoder: PgtEncoder<T>,
    pub decoder: FptDecoder<T>,
    pub mode: Mode,
}

impl<T: Scalar> FtnModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let encoder = PgtEncoder::new(&mut init, &config.encoder, IMAGE_CHANNELS)?;
        let decoder = FptDecoder::new(&mut init, &config.encoder, &config.decoder)?;
        Ok(FtnModel {
            config: config.clone(),
            encoder,
            decoder,
            mode: Mode::Infer,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Full forward pass: encoder pyramid, decoder fusion, segmentation
    /// head. In train mode, each decoder branch also runs its auxiliary
    /// head; that never changes the main logits.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        img: &Tensor<T>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<FtnOutput<T>> {
        let pyramid = self.encoder.forward(tape, img, rng)?;
        let features = self.decoder.forward(tape, &pyramid)?;
        let logits = self.decoder.seg_head.forward(tape, &features.fused)?;
        let aux_logits = match self.mode {
            Mode::Infer => Vec::new(),
            Mode::Train => {
                let mut aux = Vec::with_capacity(STAGES);
                for (head, branch) in self.decoder.aux_heads.iter().zip(&features.branches) {
                    aux.push(head.forward(tape, branch)?);
                }
                aux
            }
        };
        Ok(FtnOutput { logits, aux_logits })
    }

    pub fn visit_params(&mut self, f: &mut ParamFn<T>) {
        self.encoder.visit_params("encoder", f);
        self.decoder.visit_params("decoder", f);
    }

    /// Parameter snapshot in canonical order (cheap: buffers are shared).
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut clone = self.clone();
        let mut out = Vec::new();
        clone.visit_params(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn param_count(&self) -> u64 {
        self.named_params()
            .iter()
            .map(|(_, t)| t.numel() as u64)
            .sum()
    }

    /// Re-types every parameter (used to run the f32 artifact under the
    /// f64 oracle precision).
    pub fn cast<U: Scalar>(&self) -> Result<FtnModel<U>> {
        let mut target = FtnModel::<U>::new(&self.config, 0)?;
        target.mode = self.mode;
        let source = self.named_params();
        let mut idx = 0;
        let mut mismatch = None;
        target.visit_params(&mut |name, t| {
            let (src_name, src) = &source[idx];
            if src_name != name || src.shape() != t.shape() {
                mismatch = Some(format!("{src_name} vs {name}"));
            } else {
                *t = src.cast();
            }
            idx += 1;
        });
        if let Some(m) = mismatch {
            return Err(Error::Usage(format!("parameter walk diverged: {m}")));
        }
        Ok(target)
    }
}

/// Loss components of one batch.
#[derive(Debug, Clone)]
pub struct LossParts<T> {
    pub total: Tensor<T>,
    pub main: Tensor<T>,
    pub aux: Vec<Tensor<T>>,
}

/// Mean per-pixel cross-entropy on the main logits plus `0.1` times each
/// auxiliary branch loss.
pub fn segmentation_loss<T: Scalar>(
    tape: &mut Tape<T>,
    output: &FtnOutput<T>,
    labels: &[usize],
) -> Result<LossParts<T>> {
    let main = tape.cross_entropy(&output.logits, labels)?;
    let mut aux = Vec::with_capacity(output.aux_logits.len());
    for logits in &output.aux_logits {
        aux.push(tape.cross_entropy(logits, labels)?);
    }
    let total = match aux.split_first() {
        None => main.clone(),
        Some((first, rest)) => {
            let mut acc = first.clone();
            for a in rest {
                acc = tape.add(&acc, a)?;
            }
            let weighted = tape.scale(&acc, T::from_f64(AUX_LOSS_WEIGHT))?;
            tape.add(&main, &weighted)?
        }
    };
    Ok(LossParts { total, main, aux })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(data, shape).unwrap()
    }

    #[test]
    fn micro_model_stays_under_100k_parameters() {
        let model: FtnModel<f32> = FtnModel::new(&ModelConfig::micro(2), 1).unwrap();
        let count = model.param_count();
        assert!(count <= 100_000, "micro model has {count} params");
        assert!(count > 10_000, "suspiciously small: {count}");
    }

    #[test]
    fn forward_shape_on_64x64_micro() {
        let model: FtnModel<f32> = FtnModel::new(&ModelConfig::toy(3), 2).unwrap();
        let img = Tensor::full(&[2, 64, 64, 3], 0.4);
        let out = model
            .forward(&mut Tape::inference(), &img, None)
            .unwrap();
        assert_eq!(out.logits.shape(), &[2, 64, 64, 3]);
        assert!(out.aux_logits.is_empty());
    }

    #[test]
    fn forward_is_deterministic() {
        let model: FtnModel<f32> = FtnModel::new(&ModelConfig::micro(2), 3).unwrap();
        let img = {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let data: Vec<f32> = (0..32 * 32 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
            Tensor::from_vec(data, &[1, 32, 32, 3]).unwrap()
        };
        let a = model.forward(&mut Tape::inference(), &img, None).unwrap();
        let b = model.forward(&mut Tape::inference(), &img, None).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn any_single_pixel_change_reaches_the_logits() {
        let model: FtnModel<f64> = FtnModel::new(&ModelConfig::micro(2), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = rand_image(&mut rng, &[1, 32, 32, 3]);
        let mut bumped = img.data().to_vec();
        let idx = (17 * 32 + 23) * 3 + 1;
        bumped[idx] += 0.3;
        let img2 = Tensor::from_vec(bumped, &[1, 32, 32, 3]).unwrap();
        let a = model.forward(&mut Tape::inference(), &img, None).unwrap();
        let b = model.forward(&mut Tape::inference(), &img2, None).unwrap();
        assert!(a.logits.data() != b.logits.data());
    }

    #[test]
    fn train_mode_adds_aux_logits_without_touching_main_output() {
        let mut model: FtnModel<f32> = FtnModel::new(&ModelConfig::micro(2), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f32> = (0..32 * 32 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Tensor::from_vec(data, &[1, 32, 32, 3]).unwrap();
        let infer = model.forward(&mut Tape::inference(), &img, None).unwrap();
        model.set_mode(Mode::Train);
        let train = model.forward(&mut Tape::inference(), &img, None).unwrap();
        assert_eq!(train.aux_logits.len(), 4);
        assert_eq!(infer.logits.data(), train.logits.data());
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let out = FtnOutput {
            logits: Tensor::<f64>::full(&[1, 4, 4, 5], 0.2),
            aux_logits: Vec::new(),
        };
        let labels = vec![3usize; 16];
        let mut tape = Tape::inference();
        let parts = segmentation_loss(&mut tape, &out, &labels).unwrap();
        let want = 5.0f64.ln();
        assert!((parts.main.item().unwrap() - want).abs() < 1e-12);
        assert!((parts.total.item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_main_plus_tenth_of_aux_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = rand_image(&mut rng, &[1, 4, 4, 3]);
        let aux: Vec<Tensor<f64>> = (0..4).map(|_| rand_image(&mut rng, &[1, 4, 4, 3])).collect();
        let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
        let out = FtnOutput {
            logits: logits.clone(),
            aux_logits: aux.clone(),
        };
        let mut tape = Tape::inference();
        let parts = segmentation_loss(&mut tape, &out, &labels).unwrap();
        // Hand recomputation from the individual scalar losses.
        let main = tape.cross_entropy(&logits, &labels).unwrap().item().unwrap();
        let aux_sum: f64 = aux
            .iter()
            .map(|a| tape.cross_entropy(a, &labels).unwrap().item().unwrap())
            .sum();
        let want = main + 0.1 * aux_sum;
        let got = parts.total.item().unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert_eq!(parts.aux.len(), 4);
    }

    #[test]
    fn out_of_range_label_is_a_data_error() {
        let out = FtnOutput {
            logits: Tensor::<f32>::full(&[1, 2, 2, 3], 0.0),
            aux_logits: Vec::new(),
        };
        let labels = vec![0usize, 1, 2, 3];
        assert!(matches!(
            segmentation_loss(&mut Tape::inference(), &out, &labels),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ModelConfig::toy(7);
        let s = cfg.to_toml().unwrap();
        let back = ModelConfig::from_toml(&s).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn cast_preserves_parameters_exactly_where_representable() {
        let model: FtnModel<f32> = FtnModel::new(&ModelConfig::micro(2), 11).unwrap();
        let as64: FtnModel<f64> = model.cast().unwrap();
        let back: FtnModel<f32> = as64.cast().unwrap();
        let a = model.named_params();
        let b = back.named_params();
        assert_eq!(a.len(), b.len());
        for ((an, at), (bn, bt)) in a.iter().zip(&b) {
            assert_eq!(an, bn);
            assert_eq!(at.data(), bt.data(), "param {an}");
        }
    }
}
