//! Toy referring segmentor: a four-stage convolutional encoder conditioned on
//! instruction tokens (and optionally a spatial prior) at every stage, with
//! a skip-connected decoder producing a probability map and per-pixel
//! feature vectors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::probmaps::ProbMap;
use crate::sesm::{self, uniform, FeatureMap, SemanticField, SesmStage, StageDims};
use crate::tensorcore::{ParamId, ParamStore, Tape, Tensor, Var};

/// Number of input channels: intensity plus x and y coordinates.
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// Gated two-stream conditioning with learnable mixing.
    Sesm,
    /// Fixed mixing weights (0.5 / 0.5), gates still learnable.
    SesmFixed,
    /// Ungated additive text injection `V + sem(V, S)`; no prior stream.
    Plain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyNetConfig {
    pub image_size: usize,
    pub widths: [usize; 4],
    pub downsample: [usize; 4],
    pub vocab_size: usize,
    pub text_dim: usize,
    pub feature_dim: usize,
    pub conditioning: Conditioning,
}

impl Default for ToyNetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            widths: [8, 16, 32, 32],
            downsample: [2, 2, 2, 1],
            vocab_size: crate::simworld::VOCAB.len(),
            text_dim: 16,
            feature_dim: 8,
            conditioning: Conditioning::Sesm,
        }
    }
}

impl ToyNetConfig {
    pub fn validate(&self) -> Result<()> {
        let total: usize = self.downsample.iter().product();
        if self.downsample.contains(&0) || total == 0 || self.image_size % total != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by downsample product {total}",
                self.image_size
            )));
        }
        if self.widths.contains(&0) || self.text_dim == 0 || self.feature_dim == 0 || self.vocab_size == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(())
    }

    pub fn stage_dims(&self) -> [StageDims; 4] {
        let mut res = self.image_size;
        std::array::from_fn(|j| {
            res /= self.downsample[j];
            StageDims {
                index: j + 1,
                height: res,
                width: res,
                channels: self.widths[j],
            }
        })
    }
}

/// Per-pixel feature vectors with norm capped at one.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFeatures {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl PixelFeatures {
    pub fn get(&self, idx: usize) -> &[f64] {
        &self.values[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let i = y * self.width + x;
                values.extend_from_slice(&self.values[i * self.dim..(i + 1) * self.dim]);
            }
        }
        Self { values, ..*self }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
    k: usize,
}

#[derive(Clone, Debug)]
enum StageCond {
    Sesm(SesmStage),
    Plain(sesm::AttentionParams),
}

/// Weights plus architecture of the toy segmentor.
#[derive(Clone, Debug)]
pub struct ToyNet {
    pub config: ToyNetConfig,
    pub params: ParamStore,
    embed: ParamId,
    enc: [ConvParams; 4],
    cond: Vec<StageCond>,
    dec: [ConvParams; 3],
    feat: ConvParams,
    head: ConvParams,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[H, W, 1]` foreground probabilities.
    pub probs: Var,
    /// `[H, W, feature_dim]` penultimate features.
    pub features: Var,
}

fn conv_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize) -> ConvParams {
    let fan_in = k * k * cin;
    // He-style scaling for ReLU layers.
    let w = uniform(rng, &[fan_in, cout], fan_in);
    let w = Tensor::new(w.shape(), w.data().iter().map(|x| x * 6f64.sqrt()).collect()).expect("same shape");
    ConvParams {
        w: store.add(format!("{name}.w"), w),
        b: store.add(format!("{name}.b"), Tensor::zeros(&[cout])),
        k,
    }
}

impl ToyNet {
    pub fn new(config: ToyNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let embed = params.add("text.embed", uniform(&mut rng, &[config.vocab_size, config.text_dim], 1));
        let dims = config.stage_dims();
        let w = config.widths;
        let enc = [
            conv_params(&mut params, &mut rng, "enc1", INPUT_CHANNELS, w[0], 3),
            conv_params(&mut params, &mut rng, "enc2", w[0], w[1], 3),
            conv_params(&mut params, &mut rng, "enc3", w[1], w[2], 3),
            conv_params(&mut params, &mut rng, "enc4", w[2], w[3], 3),
        ];
        let mut cond = Vec::with_capacity(4);
        for d in dims {
            let prefix = format!("sesm{}", d.index);
            cond.push(match config.conditioning {
                Conditioning::Sesm | Conditioning::SesmFixed => {
                    let st = SesmStage::new(&mut params, &prefix, d, config.text_dim, &mut rng)?;
                    if config.conditioning == Conditioning::SesmFixed {
                        st.freeze_mixing(&mut params);
                    }
                    StageCond::Sesm(st)
                }
                Conditioning::Plain => {
                    let c = d.channels;
                    let t = config.text_dim;
                    StageCond::Plain(sesm::AttentionParams {
                        wq: params.add(format!("{prefix}.sem.wq"), uniform(&mut rng, &[c, c], c)),
                        wk: params.add(format!("{prefix}.sem.wk"), uniform(&mut rng, &[t, c], t)),
                        wv: params.add(format!("{prefix}.sem.wv"), uniform(&mut rng, &[t, c], t)),
                    })
                }
            });
        }
        let dec = [
            conv_params(&mut params, &mut rng, "dec3", w[3] + w[2], 16, 3),
            conv_params(&mut params, &mut rng, "dec2", 16 + w[1], 16, 3),
            conv_params(&mut params, &mut rng, "dec1", 16 + w[0], 8, 3),
        ];
        let feat = conv_params(&mut params, &mut rng, "feat", 8 + INPUT_CHANNELS, config.feature_dim, 3);
        let head = conv_params(&mut params, &mut rng, "head", config.feature_dim, 1, 1);
        Ok(Self {
            config,
            params,
            embed,
            enc,
            cond,
            dec,
            feat,
            head,
        })
    }

    /// Builds the input tensor `[H, W, 3]` from a row-major intensity grid.
    pub fn input_tensor(&self, image: &[f64]) -> Result<Tensor> {
        let s = self.config.image_size;
        if image.len() != s * s {
            return Err(Error::shape(
                "forward",
                format!("image has {} pixels, expected {s}x{s}", image.len()),
            ));
        }
        let scale = if s > 1 { 2.0 / (s - 1) as f64 } else { 0.0 };
        let mut data = Vec::with_capacity(s * s * INPUT_CHANNELS);
        for y in 0..s {
            for x in 0..s {
                data.push(image[y * s + x]);
                data.push(x as f64 * scale - 1.0);
                data.push(y as f64 * scale - 1.0);
            }
        }
        Tensor::new(&[s, s, INPUT_CHANNELS], data)
    }

    pub fn embed_instruction(&self, tape: &mut Tape, params: &[Var], tokens: &[u32]) -> Result<SemanticField> {
        if tokens.is_empty() {
            return Err(Error::Contract("instruction has no tokens".into()));
        }
        let v = self.config.vocab_size;
        let mut onehot = vec![0.0; tokens.len() * v];
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= v {
                return Err(Error::Domain {
                    op: "embed_instruction",
                    detail: format!("token id {t} outside vocabulary of {v}"),
                });
            }
            onehot[i * v + t as usize] = 1.0;
        }
        let oh = tape.constant(&[tokens.len(), v], onehot)?;
        let field = tape.matmul(oh, params[self.embed.0])?;
        Ok(SemanticField {
            len: tokens.len(),
            tokens: field,
        })
    }

    fn conv(&self, tape: &mut Tape, params: &[Var], x: Var, c: ConvParams) -> Result<Var> {
        let y = tape.conv2d(x, params[c.w.0], c.k)?;
        tape.add_bias(y, params[c.b.0])
    }

    /// Records a forward pass on `tape`. `params` must come from
    /// `self.params.bind(tape, ..)`. An absent prior is the constant 0.5 map.
    pub fn forward_on(&self, tape: &mut Tape, params: &[Var], image: &[f64], tokens: &[u32], prior: Option<&ProbMap>) -> Result<ForwardVars> {
        let s = self.config.image_size;
        let neutral;
        let prior = match prior {
            Some(p) => {
                if p.height() != s || p.width() != s {
                    return Err(Error::shape("forward", format!("prior {}x{} vs image {s}x{s}", p.height(), p.width())));
                }
                p
            }
            None => {
                neutral = ProbMap::filled(s, s, 0.5);
                &neutral
            }
        };
        let input = tape.leaf(&self.input_tensor(image)?);
        let text = self.embed_instruction(tape, params, tokens)?;
        let dims = self.config.stage_dims();

        let mut x = input;
        let mut skips = Vec::with_capacity(4);
        for j in 0..4 {
            let h = self.conv(tape, params, x, self.enc[j])?;
            let h = tape.relu(h)?;
            let h = if self.config.downsample[j] > 1 {
                tape.avg_pool(h, self.config.downsample[j])?
            } else {
                h
            };
            let d = dims[j];
            let tokens = tape.reshape(h, &[d.tokens(), d.channels])?;
            let v = FeatureMap { dims: d, tokens };
            let out = match &self.cond[j] {
                StageCond::Sesm(st) => {
                    let g = sesm::align_prior(tape, prior, st, params)?;
                    sesm::condition(tape, &v, &text, &g, st, params)?.tokens
                }
                StageCond::Plain(p) => {
                    let (sem, _) = sesm::attend(tape, v.tokens, text.tokens, p, params)?;
                    tape.add(v.tokens, sem)?
                }
            };
            x = tape.reshape(out, &[d.height, d.width, d.channels])?;
            skips.push(x);
        }

        let mut y = skips[3];
        for (k, j) in [2usize, 1, 0].into_iter().enumerate() {
            let cur = tape.shape(y)[0];
            let target = dims[j].height;
            if target != cur {
                y = tape.upsample(y, target / cur)?;
            }
            let cat = tape.concat_last(y, skips[j])?;
            let h = self.conv(tape, params, cat, self.dec[k])?;
            y = tape.relu(h)?;
        }
        let cur = tape.shape(y)[0];
        if cur != s {
            y = tape.upsample(y, s / cur)?;
        }
        let cat = tape.concat_last(y, input)?;
        let f = self.conv(tape, params, cat, self.feat)?;
        let features = tape.relu(f)?;
        let logits = self.conv(tape, params, features, self.head)?;
        let probs = tape.sigmoid(logits)?;
        Ok(ForwardVars { probs, features })
    }

    /// Gradient-free forward pass.
    pub fn predict(&self, image: &[f64], tokens: &[u32], prior: Option<&ProbMap>) -> Result<(ProbMap, PixelFeatures)> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, false);
        let out = self.forward_on(&mut tape, &params, image, tokens, prior)?;
        Ok((self.prob_map(&tape, out.probs)?, self.pixel_features(&tape, out.features)))
    }

    pub fn prob_map(&self, tape: &Tape, probs: Var) -> Result<ProbMap> {
        let s = self.config.image_size;
        ProbMap::new(s, s, tape.value(probs).to_vec())
    }

    pub fn pixel_features(&self, tape: &Tape, features: Var) -> PixelFeatures {
        let s = self.config.image_size;
        let dim = self.config.feature_dim;
        let mut values = tape.value(features).to_vec();
        for v in values.chunks_mut(dim) {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1.0 {
                v.iter_mut().for_each(|x| *x /= n);
            }
        }
        PixelFeatures {
            height: s,
            width: s,
            dim,
            values,
        }
    }

    /// Conditioning stages, when the network uses them.
    pub fn sesm_stages(&self) -> Vec<SesmStage> {
        self.cond
            .iter()
            .filter_map(|c| match c {
                StageCond::Sesm(s) => Some(*s),
                StageCond::Plain(_) => None,
            })
            .collect()
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.find(name)
    }
}
