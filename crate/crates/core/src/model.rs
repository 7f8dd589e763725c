//! Two-tower model: a causal PreNorm transformer over encoded action rows and
//! an MLP over pin embeddings, both ending in L2 normalization.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AttentionMask, Graph, Var};
use crate::codec::{Reader, Writer};
use crate::encoding::{input_graph, EncodedSequence, EncoderConfig, InputVars, ACTION_TYPE_VOCAB, SURFACE_VOCAB};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Matrix;

pub const TAU_MIN: f64 = 0.01;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SQM1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Output embedding dimension `D`.
    pub output_dim: usize,
    pub ffn_multiplier: usize,
    pub positional_encoding: bool,
    /// Hidden width of the pin tower.
    pub pin_hidden: usize,
    pub tau_init: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            layers: 2,
            hidden: 128,
            heads: 8,
            output_dim: 64,
            ffn_multiplier: 4,
            positional_encoding: true,
            pin_hidden: 128,
            tau_init: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_pin: usize,
    pub encoder: EncoderConfig,
    pub transformer: TransformerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_pin: 64,
            encoder: EncoderConfig::default(),
            transformer: TransformerConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let t = &self.transformer;
        if t.layers == 0 || t.output_dim == 0 || t.hidden == 0 || t.heads == 0 || t.pin_hidden == 0 {
            return Err(Error::config("layers, hidden, heads, output_dim and pin_hidden must be positive"));
        }
        if t.hidden % t.heads != 0 {
            return Err(Error::config(format!("hidden {} not divisible by heads {}", t.hidden, t.heads)));
        }
        if t.ffn_multiplier == 0 {
            return Err(Error::config("ffn_multiplier must be positive"));
        }
        if self.d_pin == 0 {
            return Err(Error::config("d_pin must be positive"));
        }
        if !(t.tau_init >= TAU_MIN) {
            return Err(Error::config(format!("tau_init must be at least {TAU_MIN}")));
        }
        Ok(())
    }

    pub fn max_len(&self) -> usize {
        self.encoder.max_len
    }

    pub fn d_in(&self) -> usize {
        self.encoder.d_in(self.d_pin)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` with `fan_in = rows`.
    FanIn,
    Value(f64),
}

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: Norm,
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    ln2: Norm,
    ffn1: Dense,
    ffn2: Dense,
}

/// Parameter slot indices, in storage order.
#[derive(Clone, Debug)]
struct Layout {
    slots: Vec<Slot>,
    action_type: usize,
    surface: usize,
    phase_absolute: usize,
    phase_relative: usize,
    phase_gap: usize,
    input: usize,
    pe: Option<usize>,
    blocks: Vec<Block>,
    head_ln: Norm,
    head1: Dense,
    head2: Dense,
    pin1: Dense,
    pin2: Dense,
    tau: usize,
}

struct LayoutBuilder {
    slots: Vec<Slot>,
}

impl LayoutBuilder {
    fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> usize {
        self.slots.push(Slot {
            name: name.into(),
            rows,
            cols,
            init,
        });
        self.slots.len() - 1
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        Dense {
            w: self.add(format!("{name}.w"), fan_in, fan_out, Init::FanIn),
            b: self.add(format!("{name}.b"), 1, fan_out, Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{name}.gamma"), 1, width, Init::Ones),
            beta: self.add(format!("{name}.beta"), 1, width, Init::Zeros),
        }
    }
}

impl Layout {
    fn new(c: &ModelConfig) -> Layout {
        let t = &c.transformer;
        let e = &c.encoder;
        let h = t.hidden;
        let f = h * t.ffn_multiplier;
        let mut b = LayoutBuilder { slots: Vec::new() };
        let action_type = b.add("input.action_type", ACTION_TYPE_VOCAB, e.action_type_width, Init::FanIn);
        let surface = b.add("input.surface", SURFACE_VOCAB, e.surface_width, Init::FanIn);
        let phase_absolute = b.add("input.phase_absolute", 1, 2 * e.absolute_periods.len(), Init::Zeros);
        let phase_relative = b.add("input.phase_relative", 1, 2 * e.relative_period_count, Init::Zeros);
        let phase_gap = b.add("input.phase_gap", 1, 2 * e.relative_period_count, Init::Zeros);
        let input = b.add("input.w", c.d_in(), h, Init::FanIn);
        let pe = t
            .positional_encoding
            .then(|| b.add("input.pe", e.max_len, h, Init::Zeros));
        let blocks = (0..t.layers)
            .map(|l| Block {
                ln1: b.norm(&format!("block{l}.ln1"), h),
                q: b.dense(&format!("block{l}.attn.q"), h, h),
                k: b.dense(&format!("block{l}.attn.k"), h, h),
                v: b.dense(&format!("block{l}.attn.v"), h, h),
                o: b.dense(&format!("block{l}.attn.o"), h, h),
                ln2: b.norm(&format!("block{l}.ln2"), h),
                ffn1: b.dense(&format!("block{l}.ffn1"), h, f),
                ffn2: b.dense(&format!("block{l}.ffn2"), f, h),
            })
            .collect();
        let head_ln = b.norm("head.ln", h);
        let head1 = b.dense("head.fc1", h, 4 * h);
        let head2 = b.dense("head.fc2", 4 * h, t.output_dim);
        let pin1 = b.dense("pin.fc1", c.d_pin, t.pin_hidden);
        let pin2 = b.dense("pin.fc2", t.pin_hidden, t.output_dim);
        let tau = b.add("tau", 1, 1, Init::Value(t.tau_init));
        Layout {
            slots: b.slots,
            action_type,
            surface,
            phase_absolute,
            phase_relative,
            phase_gap,
            input,
            pe,
            blocks,
            head_ln,
            head1,
            head2,
            pin1,
            pin2,
            tau,
        }
    }
}

/// Position `i` may attend to `j` iff `j` is the same or an older action
/// (`j >= i` in reverse-chronological rows) and `j` is a real action.
pub fn build_causal_mask(padding_mask: &[bool]) -> AttentionMask {
    AttentionMask::from_fn(padding_mask.len(), |i, j| j >= i && padding_mask[j])
}

/// Parameter values bound into a graph, either as differentiable leaves or as
/// constants.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, slot: usize) -> Var {
        self.vars[slot]
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Matrix>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let params = layout
            .slots
            .iter()
            .map(|s| match s.init {
                Init::Zeros => Matrix::zeros(s.rows, s.cols),
                Init::Ones => Matrix::filled(s.rows, s.cols, 1.0),
                Init::Value(v) => Matrix::filled(s.rows, s.cols, v),
                Init::FanIn => Matrix::uniform(s.rows, s.cols, 1.0 / (s.rows as f64).sqrt(), &mut rng),
            })
            .collect();
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.layout.slots.iter().map(|s| s.name.as_str())
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Matrix::len).sum()
    }

    pub fn tau(&self) -> f64 {
        self.params[self.layout.tau].get(0, 0)
    }

    pub fn tau_slot(&self) -> usize {
        self.layout.tau
    }

    /// Projects the temperature back onto `tau >= TAU_MIN`.
    pub fn clamp_tau(&mut self) {
        let t = &mut self.params[self.layout.tau];
        let v = t.get(0, 0).max(TAU_MIN);
        t.set(0, 0, v);
    }

    /// Replaces all parameters, checking shapes.
    pub fn set_params(&mut self, params: Vec<Matrix>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(format!("{} tensors, expected {}", params.len(), self.params.len())));
        }
        for (p, s) in params.iter().zip(&self.layout.slots) {
            if p.shape() != (s.rows, s.cols) {
                return Err(Error::shape(format!("{} has shape {:?}", s.name, p.shape())));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Identifier of the parameter values as stored in a checkpoint.
    pub fn version(&self) -> u32 {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for p in &self.params {
            for v in p.data() {
                h.update((*v as f32).to_le_bytes());
            }
        }
        let d = h.finalize();
        u32::from_le_bytes([d[0], d[1], d[2], d[3]])
    }

    /// Adds every parameter to `g`, as gradient leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if trainable {
                    g.param(i, p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn dense(&self, g: &mut Graph, b: &Bound, x: Var, d: Dense) -> Var {
        let y = g.matmul(x, b.var(d.w));
        g.add_row(y, b.var(d.b))
    }

    fn norm(&self, g: &mut Graph, b: &Bound, x: Var, n: Norm) -> Var {
        g.layer_norm(x, b.var(n.gamma), b.var(n.beta))
    }

    /// Final hidden states `(B * M) x H` for the stacked sequences.
    pub fn hidden_graph(&self, g: &mut Graph, b: &Bound, seqs: &[&EncodedSequence]) -> Result<Var> {
        let l = &self.layout;
        let m = self.config.max_len();
        for s in seqs {
            if s.pins.cols() != self.config.d_pin {
                return Err(Error::shape(format!(
                    "pin dimension {} != {}",
                    s.pins.cols(),
                    self.config.d_pin
                )));
            }
        }
        let vars = InputVars {
            action_type: b.var(l.action_type),
            surface: b.var(l.surface),
            phase_absolute: b.var(l.phase_absolute),
            phase_relative: b.var(l.phase_relative),
            phase_gap: b.var(l.phase_gap),
        };
        let x = input_graph(g, &self.config.encoder, seqs, &vars)?;
        let mut v = g.matmul(x, b.var(l.input));
        if let Some(pe) = l.pe {
            let tiled = g.tile_rows(b.var(pe), seqs.len());
            v = g.add(v, tiled);
        }
        let masks: Vec<AttentionMask> = seqs.iter().map(|s| build_causal_mask(&s.padding_mask())).collect();
        debug_assert!(masks.iter().all(|mk| mk.len() == m));
        let heads = self.config.transformer.heads;
        for blk in &l.blocks {
            let n1 = self.norm(g, b, v, blk.ln1);
            let q = self.dense(g, b, n1, blk.q);
            let k = self.dense(g, b, n1, blk.k);
            let val = self.dense(g, b, n1, blk.v);
            let a = g.attention(q, k, val, heads, masks.clone());
            let a = self.dense(g, b, a, blk.o);
            let u = g.add(v, a);
            let n2 = self.norm(g, b, u, blk.ln2);
            let f = self.dense(g, b, n2, blk.ffn1);
            let f = g.gelu(f);
            let f = self.dense(g, b, f, blk.ffn2);
            v = g.add(u, f);
        }
        Ok(v)
    }

    /// Output MLP and normalization applied to hidden rows.
    pub fn head_graph(&self, g: &mut Graph, b: &Bound, hidden: Var) -> Var {
        let l = &self.layout;
        let x = self.norm(g, b, hidden, l.head_ln);
        let x = self.dense(g, b, x, l.head1);
        let x = g.gelu(x);
        let x = self.dense(g, b, x, l.head2);
        g.l2_normalize(x)
    }

    /// Unit-norm user embeddings for the selected stacked rows
    /// (`b * M + position`).
    pub fn user_graph(&self, g: &mut Graph, b: &Bound, seqs: &[&EncodedSequence], rows: Vec<usize>) -> Result<Var> {
        let h = self.hidden_graph(g, b, seqs)?;
        let picked = g.gather_rows(h, rows);
        Ok(self.head_graph(g, b, picked))
    }

    /// Unit-norm pin tower outputs for `n x d_pin` inputs.
    pub fn pin_graph(&self, g: &mut Graph, b: &Bound, pins: Matrix) -> Result<Var> {
        if pins.cols() != self.config.d_pin {
            return Err(Error::shape(format!("pin input width {} != {}", pins.cols(), self.config.d_pin)));
        }
        let l = &self.layout;
        let x = g.constant(pins);
        let x = self.dense(g, b, x, l.pin1);
        let x = g.gelu(x);
        let x = self.dense(g, b, x, l.pin2);
        Ok(g.l2_normalize(x))
    }

    /// `M x D` embeddings; row 0 follows the most recent action and padded
    /// rows are zero.
    pub fn user_forward(&self, seq: &EncodedSequence) -> Result<Matrix> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let m = self.config.max_len();
        let out = self.user_graph(&mut g, &b, &[seq], (0..m).collect())?;
        let mut e = g.take_value(out);
        for r in seq.len()..m {
            e.row_mut(r).fill(0.0);
        }
        Ok(e)
    }

    /// Embedding after the most recent action, for each sequence.
    pub fn user_embeddings(&self, seqs: &[&EncodedSequence]) -> Result<Matrix> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let m = self.config.max_len();
        let rows = (0..seqs.len()).map(|i| i * m).collect();
        let out = self.user_graph(&mut g, &b, seqs, rows)?;
        Ok(g.take_value(out))
    }

    pub fn pin_forward(&self, pins: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let out = self.pin_graph(&mut g, &b, pins.clone())?;
        Ok(g.take_value(out))
    }

    /// Writes the model with `f32` parameters.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(BufWriter::new(File::create(path)?));
        w.bytes(CHECKPOINT_MAGIC)?;
        w.u32(CHECKPOINT_VERSION)?;
        w.str(&serde_json::to_string(&self.config).map_err(|e| Error::config(e.to_string()))?)?;
        w.u32(self.params.len() as u32)?;
        for (p, s) in self.params.iter().zip(&self.layout.slots) {
            w.str(&s.name)?;
            w.u32(p.rows() as u32)?;
            w.u32(p.cols() as u32)?;
            for v in p.data() {
                w.f32(*v as f32)?;
            }
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut r = Reader::new(BufReader::new(File::open(path)?));
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let json = r.str(1 << 20)?;
        let config: ModelConfig =
            serde_json::from_str(&json).map_err(|e| r.error(format!("bad config block: {e}")))?;
        let mut model = Model::new(config, 0).map_err(|e| r.error(format!("invalid config block: {e}")))?;
        let n = r.u32()? as usize;
        if n != model.params.len() {
            return Err(r.error(format!("{n} tensors, config implies {}", model.params.len())));
        }
        for i in 0..n {
            r.set_record(Some(i as u64));
            let name = r.str(256)?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let slot = &model.layout.slots[i];
            if name != slot.name || (rows, cols) != (slot.rows, slot.cols) {
                return Err(r.error(format!(
                    "tensor {name} {rows}x{cols} does not match {} {}x{}",
                    slot.name, slot.rows, slot.cols
                )));
            }
            let data = r.f32s(rows * cols)?.into_iter().map(f64::from).collect();
            model.params[i] = Matrix::from_vec(rows, cols, data);
        }
        r.set_record(None);
        r.expect_eof()?;
        Ok(model)
    }
}
