//! CNN stack, flatten-transpose bridge, two-layer back-end and symbol
//! projection, shared by line (`64×W`) and page (`64·L×W`) inputs.

mod config;
mod params;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use config::{Backend, CnnLayerSpec, ModelConfig, Profile, CONFIG_VERSION, DEFAULT_STACK, LINE_HEIGHT};
pub use params::{ParamEntry, ParamStore};

use crate::error::{Error, Result};
use crate::tensor::nn::{
    blstm_layer, transformer_encoder_layer, AttentionParams, EncoderLayerParams, LstmParams, PositionalTable,
};
use crate::tensor::{BnObservation, Graph, Mode, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    positions: Arc<PositionalTable>,
}

/// Graph handles of the parameters one forward pass touched.
#[derive(Debug, Default)]
pub struct Bindings {
    vars: Vec<Option<Var>>,
}

impl Bindings {
    /// `(parameter index, graph var)` for every bound trainable tensor.
    pub fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v)))
    }
}

pub struct Forward {
    /// `T × n_symbols` unnormalized scores.
    pub logits: Var,
    pub bindings: Bindings,
}

struct Binder<'a> {
    store: &'a ParamStore,
    bindings: Bindings,
}

impl Binder<'_> {
    fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        let idx = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        if let Some(v) = self.bindings.vars[idx] {
            return Ok(v);
        }
        let (_, e) = self.store.entry(idx);
        let v = if e.trainable {
            g.param(e.tensor.clone())
        } else {
            g.constant((*e.tensor).clone())
        };
        if e.trainable {
            self.bindings.vars[idx] = Some(v);
        }
        Ok(v)
    }
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

/// `n×n` orthogonal matrix from Gram–Schmidt on a Gaussian draw.
fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = cols.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= dot * b;
                }
            }
            let norm = cols[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols[i].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            let mut out = vec![0.0; n * n];
            for (c, col) in cols.iter().enumerate() {
                for (r, v) in col.iter().enumerate() {
                    out[r * n + c] = *v;
                }
            }
            return out;
        }
    }
}

fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let mut cin = 1;
    for (i, s) in cfg.cnn.iter().enumerate() {
        let fan_in = cin * s.kernel[0] * s.kernel[1];
        let c = s.out_channels;
        p.insert(
            format!("cnn.{i}.weight"),
            kaiming_uniform(&mut rng, &[c, cin, s.kernel[0], s.kernel[1]], fan_in, 2f64.sqrt()),
            true,
        );
        p.insert(format!("cnn.{i}.bias"), Tensor::zeros(&[c]), true);
        p.insert(format!("cnn.{i}.bn.gamma"), Tensor::full(&[c], 1.0), true);
        p.insert(format!("cnn.{i}.bn.beta"), Tensor::zeros(&[c]), true);
        p.insert(format!("cnn.{i}.bn.running_mean"), Tensor::zeros(&[c]), false);
        p.insert(format!("cnn.{i}.bn.running_var"), Tensor::full(&[c], 1.0), false);
        cin = c;
    }
    let d = cfg.feature_dim();
    // PyTorch-style linear init: kaiming-uniform with a = sqrt(5).
    let linear = |rng: &mut ChaCha8Rng, p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        p.insert(
            format!("{name}.w"),
            Tensor::uniform(&[fan_in, fan_out], bound, rng),
            true,
        );
        p.insert(format!("{name}.b"), Tensor::uniform(&[fan_out], bound, rng), true);
    };
    let mut width = d;
    for l in 0..cfg.backend_layers {
        let pre = format!("backend.{l}");
        match cfg.backend {
            Backend::Transformer => {
                for proj in ["q", "k", "v", "o"] {
                    linear(&mut rng, &mut p, &format!("{pre}.attn.{proj}"), d, d);
                }
                p.insert(format!("{pre}.ln1.gamma"), Tensor::full(&[d], 1.0), true);
                p.insert(format!("{pre}.ln1.beta"), Tensor::zeros(&[d]), true);
                linear(&mut rng, &mut p, &format!("{pre}.ff1"), d, cfg.hidden_dim);
                linear(&mut rng, &mut p, &format!("{pre}.ff2"), cfg.hidden_dim, d);
                p.insert(format!("{pre}.ln2.gamma"), Tensor::full(&[d], 1.0), true);
                p.insert(format!("{pre}.ln2.beta"), Tensor::zeros(&[d]), true);
            }
            Backend::Blstm => {
                let h = cfg.hidden_dim;
                for dir in ["fwd", "bwd"] {
                    let bound = 1.0 / (h as f64).sqrt();
                    p.insert(
                        format!("{pre}.{dir}.w_ih"),
                        Tensor::uniform(&[width, 4 * h], bound, &mut rng),
                        true,
                    );
                    let mut w_hh = vec![0.0; h * 4 * h];
                    for gate in 0..4 {
                        let q = orthogonal(&mut rng, h);
                        for r in 0..h {
                            for c in 0..h {
                                w_hh[r * 4 * h + gate * h + c] = q[r * h + c];
                            }
                        }
                    }
                    p.insert(
                        format!("{pre}.{dir}.w_hh"),
                        Tensor::new(vec![h, 4 * h], w_hh).expect("shape"),
                        true,
                    );
                    // forget-gate bias starts at 1
                    let bias = Tensor::from_fn(&[4 * h], |i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 });
                    p.insert(format!("{pre}.{dir}.bias"), bias, true);
                }
                width = 2 * h;
            }
        }
    }
    linear(&mut rng, &mut p, "proj", width, cfg.n_symbols);
    p
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Self::from_parts(config, params))
    }

    pub(crate) fn from_parts(config: ModelConfig, params: ParamStore) -> Self {
        let positions = Arc::new(PositionalTable::new(config.feature_dim()));
        Self {
            config,
            params,
            positions,
        }
    }

    /// Builds a model from stored tensors, checking names and shapes against
    /// a fresh initialization of `config`.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, model declares {}",
                tensors.len(),
                model.params.len()
            )));
        }
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            let (expected, _) = model.params.entry(i);
            if expected != name {
                return Err(Error::Checkpoint(format!("tensor {i} is {name}, expected {expected}")));
            }
            model.params.set(&name, t)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn output_lengths(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.config.output_lengths(height, width)
    }

    fn check_image(&self, image: &Tensor) -> Result<(usize, usize)> {
        if image.rank() != 3 || image.shape()[0] != 1 {
            return Err(Error::Shape(format!("expected a 1×H×W image, got {:?}", image.shape())));
        }
        image.check_finite("input image")?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        self.output_lengths(h, w)?;
        Ok((h, w))
    }

    fn cnn(&self, g: &mut Graph, b: &mut Binder<'_>, image: &Tensor) -> Result<Var> {
        self.check_image(image)?;
        let mut x = g.constant(image.clone());
        for (i, s) in self.config.cnn.iter().enumerate() {
            let w = b.var(g, &format!("cnn.{i}.weight"))?;
            let bias = b.var(g, &format!("cnn.{i}.bias"))?;
            x = g.conv2d(x, w, bias, (s.stride[0], s.stride[1]), (s.padding[0], s.padding[1]))?;
            let gamma = b.var(g, &format!("cnn.{i}.bn.gamma"))?;
            let beta = b.var(g, &format!("cnn.{i}.bn.beta"))?;
            let rm = self.params.get(&format!("cnn.{i}.bn.running_mean"))?.clone();
            let rv = self.params.get(&format!("cnn.{i}.bn.running_var"))?.clone();
            x = g.batch_norm(x, gamma, beta, (rm.data(), rv.data()), i)?;
            x = g.relu(x);
        }
        Ok(x)
    }

    fn binder(&self) -> Binder<'_> {
        Binder {
            store: &self.params,
            bindings: Bindings {
                vars: vec![None; self.params.len()],
            },
        }
    }

    /// CNN feature map `C × H' × W'`.
    pub fn cnn_forward(&self, g: &mut Graph, image: &Tensor) -> Result<(Var, Bindings)> {
        let mut b = self.binder();
        let x = self.cnn(g, &mut b, image)?;
        Ok((x, b.bindings))
    }

    /// Full forward pass to `T × n_symbols` logits with `T = H'·W'`.
    pub fn forward(&self, g: &mut Graph, image: &Tensor) -> Result<Forward> {
        let mut b = self.binder();
        let fmap = self.cnn(g, &mut b, image)?;
        let mut seq = g.flatten_transpose(fmap)?;
        let cfg = &self.config;
        match cfg.backend {
            Backend::Transformer => {
                let t = g.shape(seq)[0];
                let pe = g.constant(self.positions.get(t));
                seq = g.add(seq, pe)?;
                seq = g.dropout(seq, cfg.dropout);
                for l in 0..cfg.backend_layers {
                    let pre = format!("backend.{l}");
                    let mut v = |n: &str| b.var(g, &format!("{pre}.{n}"));
                    let p = EncoderLayerParams {
                        attn: AttentionParams {
                            wq: v("attn.q.w")?,
                            bq: v("attn.q.b")?,
                            wk: v("attn.k.w")?,
                            bk: v("attn.k.b")?,
                            wv: v("attn.v.w")?,
                            bv: v("attn.v.b")?,
                            wo: v("attn.o.w")?,
                            bo: v("attn.o.b")?,
                        },
                        ln1_gamma: v("ln1.gamma")?,
                        ln1_beta: v("ln1.beta")?,
                        ff1_w: v("ff1.w")?,
                        ff1_b: v("ff1.b")?,
                        ff2_w: v("ff2.w")?,
                        ff2_b: v("ff2.b")?,
                        ln2_gamma: v("ln2.gamma")?,
                        ln2_beta: v("ln2.beta")?,
                    };
                    seq = transformer_encoder_layer(g, seq, &p, cfg.heads, cfg.dropout)?;
                }
            }
            Backend::Blstm => {
                for l in 0..cfg.backend_layers {
                    let pre = format!("backend.{l}");
                    let mut lstm = |dir: &str| -> Result<LstmParams> {
                        Ok(LstmParams {
                            w_ih: b.var(g, &format!("{pre}.{dir}.w_ih"))?,
                            w_hh: b.var(g, &format!("{pre}.{dir}.w_hh"))?,
                            bias: b.var(g, &format!("{pre}.{dir}.bias"))?,
                        })
                    };
                    let fwd = lstm("fwd")?;
                    let bwd = lstm("bwd")?;
                    seq = g.dropout(seq, cfg.dropout);
                    seq = blstm_layer(g, seq, &fwd, &bwd)?;
                }
            }
        }
        let w = b.var(g, "proj.w")?;
        let bias = b.var(g, "proj.b")?;
        let logits = g.dense(seq, w, bias)?;
        Ok(Forward {
            logits,
            bindings: b.bindings,
        })
    }

    /// Eval-mode logits without keeping the tape around.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(Mode::Eval, 0);
        let f = self.forward(&mut g, image)?;
        let out = g.value(f.logits).clone();
        out.check_finite("logits")?;
        Ok(out)
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_bn_observations(&mut self, observations: &[BnObservation]) -> Result<()> {
        for obs in observations {
            for (suffix, values) in [("running_mean", &obs.mean), ("running_var", &obs.var)] {
                let name = format!("cnn.{}.bn.{suffix}", obs.tag);
                let idx = self
                    .params
                    .index_of(&name)
                    .ok_or_else(|| Error::Config(format!("missing buffer {name}")))?;
                let t = self.params.tensor_mut(idx);
                if t.len() != values.len() {
                    return Err(Error::Shape(format!("{name}: observation width")));
                }
                for (r, v) in t.data_mut().iter_mut().zip(values) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
        }
        Ok(())
    }
}

/// Which parameter tensors a bootstrap copied from the line model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub copied: Vec<String>,
    pub reinitialized: Vec<String>,
}

/// Builds a page model whose CNN (and every back-end tensor of matching
/// shape) is copied bit-exactly from a converged line model.
pub fn bootstrap_from_line_model(
    line: &Model,
    line_symbols_hash: &str,
    page_config: &ModelConfig,
    page_symbols_hash: &str,
    seed: u64,
) -> Result<(Model, BootstrapReport)> {
    if line_symbols_hash != page_symbols_hash {
        return Err(Error::SymbolMismatch {
            expected: page_symbols_hash.to_string(),
            found: line_symbols_hash.to_string(),
        });
    }
    let line_cnn = &line.config.cnn;
    for i in 0..line_cnn.len().max(page_config.cnn.len()) {
        match (line_cnn.get(i), page_config.cnn.get(i)) {
            (Some(a), Some(b)) if a == b => {}
            (a, b) => {
                let show = |s: Option<&CnnLayerSpec>| s.map_or("absent".to_string(), |s| s.to_string());
                return Err(Error::CnnMismatch {
                    layer: i + 1,
                    detail: format!("line model has {}, page config has {}", show(a), show(b)),
                });
            }
        }
    }
    if line.config.n_symbols != page_config.n_symbols {
        return Err(Error::SymbolMismatch {
            expected: format!("{} symbols", page_config.n_symbols),
            found: format!("{} symbols", line.config.n_symbols),
        });
    }
    let mut page = Model::new(page_config.clone(), seed)?;
    let mut report = BootstrapReport::default();
    let names: Vec<String> = page.params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let src = line.params.get(&name).ok();
        let copy = match src {
            Some(t) => {
                let same_shape = t.shape() == page.params.get(&name)?.shape();
                same_shape && (name.starts_with("cnn.") || line.config.backend == page_config.backend)
            }
            None => false,
        };
        if copy {
            page.params.set(&name, (**src.expect("checked")).clone())?;
            report.copied.push(name);
        } else {
            report.reinitialized.push(name);
        }
    }
    Ok((page, report))
}
