//! Parameter containers, initialization and the fixed tensor naming order.

use super::config::ModelConfig;
use super::tensor::Scalar;
use super::ModelError;
use crate::rng::DetRng;

pub(crate) const INIT_DOMAIN: &str = "init";

/// A named parameter block: shape plus row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    fn dims2(&self) -> (usize, usize) {
        (self.shape[0], self.shape[1])
    }
}

/// `y = x W + b`, weight stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.weight.dims2()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Tensor<T>,
    pub shift: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

impl<T: Scalar> Attention<T> {
    fn zeros(d: usize) -> Self {
        Self {
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub attn_norm: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ffn_norm: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub self_norm: LayerNorm<T>,
    pub self_attn: Attention<T>,
    pub cross_norm: LayerNorm<T>,
    pub cross_attn: Attention<T>,
    pub ffn_norm: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

/// Every trainable tensor. The embedding doubles as the output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub embedding: Tensor<T>,
    pub encoder: Vec<EncoderLayer<T>>,
    pub encoder_norm: LayerNorm<T>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub decoder_norm: LayerNorm<T>,
}

type Named<'a, T> = Vec<(String, &'a Tensor<T>)>;

fn linear_refs<'a, T>(p: &str, l: &'a Linear<T>, out: &mut Named<'a, T>) {
    out.push((format!("{p}.weight"), &l.weight));
    out.push((format!("{p}.bias"), &l.bias));
}

fn norm_refs<'a, T>(p: &str, n: &'a LayerNorm<T>, out: &mut Named<'a, T>) {
    out.push((format!("{p}.gain"), &n.gain));
    out.push((format!("{p}.shift"), &n.shift));
}

fn attn_refs<'a, T>(p: &str, a: &'a Attention<T>, out: &mut Named<'a, T>) {
    linear_refs(&format!("{p}.query"), &a.query, out);
    linear_refs(&format!("{p}.key"), &a.key, out);
    linear_refs(&format!("{p}.value"), &a.value, out);
    linear_refs(&format!("{p}.output"), &a.output, out);
}

fn ffn_refs<'a, T>(p: &str, f: &'a FeedForward<T>, out: &mut Named<'a, T>) {
    linear_refs(&format!("{p}.up"), &f.up, out);
    linear_refs(&format!("{p}.down"), &f.down, out);
}

fn linear_muts<'a, T>(l: &'a mut Linear<T>, out: &mut Vec<&'a mut Tensor<T>>) {
    out.push(&mut l.weight);
    out.push(&mut l.bias);
}

fn norm_muts<'a, T>(n: &'a mut LayerNorm<T>, out: &mut Vec<&'a mut Tensor<T>>) {
    out.push(&mut n.gain);
    out.push(&mut n.shift);
}

fn attn_muts<'a, T>(a: &'a mut Attention<T>, out: &mut Vec<&'a mut Tensor<T>>) {
    linear_muts(&mut a.query, out);
    linear_muts(&mut a.key, out);
    linear_muts(&mut a.value, out);
    linear_muts(&mut a.output, out);
}

fn ffn_muts<'a, T>(f: &'a mut FeedForward<T>, out: &mut Vec<&'a mut Tensor<T>>) {
    linear_muts(&mut f.up, out);
    linear_muts(&mut f.down, out);
}

impl<T: Scalar> Params<T> {
    /// All-zero parameters of the right shapes (norm gains included); the
    /// gradient and optimizer-moment containers.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let f = config.d_ffn;
        let ffn = || FeedForward {
            up: Linear::zeros(d, f),
            down: Linear::zeros(f, d),
        };
        let norm = || LayerNorm {
            gain: Tensor::zeros(&[d]),
            shift: Tensor::zeros(&[d]),
        };
        Self {
            embedding: Tensor::zeros(&[config.vocab_size, d]),
            encoder: (0..config.enc_layers)
                .map(|_| EncoderLayer {
                    attn_norm: norm(),
                    attn: Attention::zeros(d),
                    ffn_norm: norm(),
                    ffn: ffn(),
                })
                .collect(),
            encoder_norm: norm(),
            decoder: (0..config.dec_layers)
                .map(|_| DecoderLayer {
                    self_norm: norm(),
                    self_attn: Attention::zeros(d),
                    cross_norm: norm(),
                    cross_attn: Attention::zeros(d),
                    ffn_norm: norm(),
                    ffn: ffn(),
                })
                .collect(),
            decoder_norm: norm(),
        }
    }

    /// Tensors with stable names, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embedding".to_owned(), &self.embedding)];
        for (i, l) in self.encoder.iter().enumerate() {
            let p = format!("encoder.{i}");
            norm_refs(&format!("{p}.attn_norm"), &l.attn_norm, &mut out);
            attn_refs(&format!("{p}.attn"), &l.attn, &mut out);
            norm_refs(&format!("{p}.ffn_norm"), &l.ffn_norm, &mut out);
            ffn_refs(&format!("{p}.ffn"), &l.ffn, &mut out);
        }
        norm_refs("encoder_norm", &self.encoder_norm, &mut out);
        for (i, l) in self.decoder.iter().enumerate() {
            let p = format!("decoder.{i}");
            norm_refs(&format!("{p}.self_norm"), &l.self_norm, &mut out);
            attn_refs(&format!("{p}.self_attn"), &l.self_attn, &mut out);
            norm_refs(&format!("{p}.cross_norm"), &l.cross_norm, &mut out);
            attn_refs(&format!("{p}.cross_attn"), &l.cross_attn, &mut out);
            norm_refs(&format!("{p}.ffn_norm"), &l.ffn_norm, &mut out);
            ffn_refs(&format!("{p}.ffn"), &l.ffn, &mut out);
        }
        norm_refs("decoder_norm", &self.decoder_norm, &mut out);
        out
    }

    /// Same order as [`Params::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.encoder {
            norm_muts(&mut l.attn_norm, &mut out);
            attn_muts(&mut l.attn, &mut out);
            norm_muts(&mut l.ffn_norm, &mut out);
            ffn_muts(&mut l.ffn, &mut out);
        }
        norm_muts(&mut self.encoder_norm, &mut out);
        for l in &mut self.decoder {
            norm_muts(&mut l.self_norm, &mut out);
            attn_muts(&mut l.self_attn, &mut out);
            norm_muts(&mut l.cross_norm, &mut out);
            attn_muts(&mut l.cross_attn, &mut out);
            norm_muts(&mut l.ffn_norm, &mut out);
            ffn_muts(&mut l.ffn, &mut out);
        }
        norm_muts(&mut self.decoder_norm, &mut out);
        out
    }

    pub fn num_elements(&self) -> usize {
        self.named().iter().map(|(_, t)| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }
}

/// A configured network: parameters plus the sinusoidal position table.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
    /// `max_positions * d_model`
    positions: Vec<T>,
}

fn position_table<T: Scalar>(rows: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * d];
    for pos in 0..rows {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out[pos * d + 2 * i] = T::of(angle.sin());
            out[pos * d + 2 * i + 1] = T::of(angle.cos());
        }
        if d % 2 == 1 {
            out[pos * d + d - 1] = T::of((pos as f64).sin());
        }
    }
    out
}

impl<T: Scalar> Transformer<T> {
    /// Wraps existing parameters; shapes must match the config.
    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let skeleton = Params::<T>::zeros(&config);
        let want = skeleton.named();
        let got = params.named();
        if want.len() != got.len() {
            return Err(ModelError::InvalidConfig("parameter layout differs from config".into()));
        }
        for ((name, w), (_, g)) in want.iter().zip(&got) {
            if w.shape != g.shape {
                return Err(ModelError::InvalidConfig(format!("{name}: shape {:?} expected {:?}", g.shape, w.shape)));
            }
        }
        let rows = config.max_source_len.max(config.max_target_len) + 1;
        let positions = position_table(rows, config.d_model);
        Ok(Self { config, params, positions })
    }

    pub fn position(&self, pos: usize) -> &[T] {
        let d = self.config.d_model;
        &self.positions[pos * d..(pos + 1) * d]
    }

    pub fn max_positions(&self) -> usize {
        self.positions.len() / self.config.d_model
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        let mut params = Params::<U>::zeros(&self.config);
        for ((_, src), dst) in self.params.named().into_iter().zip(params.tensors_mut()) {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d = U::of(s.as_f64());
            }
        }
        Transformer::from_params(self.config.clone(), params).expect("same config")
    }
}

/// Seeded initialization: matrices uniform in `+-sqrt(6 / (fan_in + fan_out))`,
/// biases and norm shifts zero, norm gains one.
pub fn init_model<T: Scalar>(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Transformer<T>, ModelError> {
    let config = ModelConfig {
        vocab_size,
        ..config.clone()
    };
    config.validate()?;
    let mut params = Params::<T>::zeros(&config);
    let mut rng = DetRng::new(seed, INIT_DOMAIN, 0);
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        if t.rank() == 2 {
            let (fan_in, fan_out) = t.dims2();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in &mut t.data {
                *x = T::of(rng.symmetric(bound));
            }
        } else if name.ends_with(".gain") {
            t.data.iter_mut().for_each(|x| *x = T::one());
        }
    }
    Transformer::from_params(config, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::count_params;

    fn small() -> ModelConfig {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 1,
            d_model: 8,
            d_ffn: 6,
            heads: 2,
            ..ModelConfig::monolingual(10)
        }
    }

    #[test]
    fn element_count_matches_closed_form() {
        for cfg in [small(), ModelConfig::monolingual(57), ModelConfig::multilingual(300)] {
            let m = init_model::<f32>(&cfg, cfg.vocab_size, 1).unwrap();
            assert_eq!(m.params.num_elements(), count_params(&cfg, cfg.vocab_size));
        }
    }

    #[test]
    fn independent_layer_sizes() {
        // Encoder layer: 2 norms (4d) + 4 projections (4d^2 + 4d) + ffn (2df + f + d).
        let d = 256usize;
        let f = 64usize;
        let enc = 4 * d + 4 * d * d + 4 * d + 2 * d * f + f + d;
        let dec = 6 * d + 8 * d * d + 8 * d + 2 * d * f + f + d;
        assert_eq!(enc, 297_280);
        assert_eq!(dec, 560_960);
        let cfg = ModelConfig::monolingual(100);
        assert_eq!(count_params(&cfg, 100), 100 * d + 3 * enc + 3 * dec + 4 * d);
    }

    #[test]
    fn init_is_seeded() {
        let a = init_model::<f32>(&small(), 10, 5).unwrap();
        let b = init_model::<f32>(&small(), 10, 5).unwrap();
        let c = init_model::<f32>(&small(), 10, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_ranges() {
        let m = init_model::<f64>(&small(), 10, 3).unwrap();
        for (name, t) in m.params.named() {
            if t.rank() == 2 {
                let bound = (6.0 / (t.shape[0] + t.shape[1]) as f64).sqrt();
                assert!(t.data.iter().all(|x| x.abs() <= bound), "{name}");
                assert!(t.data.iter().any(|x| *x != 0.0), "{name}");
            } else if name.ends_with(".gain") {
                assert!(t.data.iter().all(|&x| x == 1.0));
            } else {
                assert!(t.data.iter().all(|&x| x == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn bad_heads_rejected() {
        let cfg = ModelConfig { heads: 3, ..small() };
        assert!(matches!(init_model::<f32>(&cfg, 10, 0), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn names_unique_and_aligned() {
        let mut m = init_model::<f32>(&small(), 10, 0).unwrap();
        let names: Vec<String> = m.params.named().into_iter().map(|(n, _)| n).collect();
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert_eq!(m.params.tensors_mut().len(), names.len());
    }
}
