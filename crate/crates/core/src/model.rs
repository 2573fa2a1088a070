//! The tiny encoder-decoder that maps a source sequence to a `Lattice`,
//! plus glancing input construction, the Adam optimizer, and the versioned
//! checkpoint format.
//!
//! The decoder input copy-upsamples encoder states by the factor `lambda`;
//! the token head is a d x V projection and the transition head a scaled
//! dot product of two d x d projections of the decoder states. DP losses
//! consume the resulting lattice outside the tape and inject their
//! gradients back at the two head nodes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path as FsPath;

use crate::dp::viterbi_align;
use crate::error::{Error, Result};
use crate::lattice::{Lattice, LatticeGrad, PathConstraint};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Model width.
    pub d: usize,
    /// Encoder and decoder block count.
    pub layers: usize,
    pub heads: usize,
    /// Decoder length multiplier: L = lambda * m, capped at l_max.
    pub lambda: usize,
    pub l_max: usize,
    pub vocab: usize,
    pub max_src_len: usize,
    pub constraint: PathConstraint,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            layers: 2,
            heads: 2,
            lambda: 4,
            l_max: 96,
            vocab: 32,
            max_src_len: 24,
            constraint: PathConstraint::Anchored,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.lambda < 1 || self.l_max < 2 || self.vocab < 5 || self.max_src_len < 1 {
            return Err(Error::Config("degenerate model dimensions".into()));
        }
        Ok(())
    }

    pub fn decoder_len(&self, src_len: usize) -> usize {
        (self.lambda * src_len).min(self.l_max)
    }

    fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("d".into(), self.d.to_string()),
            ("layers".into(), self.layers.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("lambda".into(), self.lambda.to_string()),
            ("l_max".into(), self.l_max.to_string()),
            ("vocab".into(), self.vocab.to_string()),
            ("max_src_len".into(), self.max_src_len.to_string()),
            ("constraint".into(), self.constraint.to_string()),
        ]
    }

    fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<ModelConfig> {
        let get = |key: &str| -> Result<&String> {
            pairs
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("missing config key '{key}'")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad config value for '{key}'")))
        };
        Ok(ModelConfig {
            d: num("d")?,
            layers: num("layers")?,
            heads: num("heads")?,
            lambda: num("lambda")?,
            l_max: num("l_max")?,
            vocab: num("vocab")?,
            max_src_len: num("max_src_len")?,
            constraint: get("constraint")?.parse()?,
        })
    }
}

/// Named dense parameter tensors.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        let d = config.d;
        let dh = d / config.heads;
        let std = 0.02f32;
        fn put(
            tensors: &mut BTreeMap<String, Tensor>,
            name: String,
            rows: usize,
            cols: usize,
            rng: &mut Rng,
            s: f32,
        ) {
            tensors.insert(name, Tensor::randn(rows, cols, s, rng));
        }
        fn ln(tensors: &mut BTreeMap<String, Tensor>, prefix: &str, d: usize) {
            tensors.insert(format!("{prefix}.ln_g"), Tensor::from_vec(1, d, vec![1.0; d]));
            tensors.insert(format!("{prefix}.ln_b"), Tensor::zeros(1, d));
        }
        put(&mut tensors, "embed.token".into(), config.vocab, d, &mut rng, std);
        put(&mut tensors, "embed.enc_pos".into(), config.max_src_len, d, &mut rng, std);
        put(&mut tensors, "embed.dec_pos".into(), config.l_max, d, &mut rng, std);
        for stack in ["enc", "dec"] {
            for layer in 0..config.layers {
                let p = format!("{stack}{layer}");
                for h in 0..config.heads {
                    put(&mut tensors, format!("{p}.attn.h{h}.wq"), d, dh, &mut rng, std);
                    put(&mut tensors, format!("{p}.attn.h{h}.wk"), d, dh, &mut rng, std);
                    put(&mut tensors, format!("{p}.attn.h{h}.wv"), d, dh, &mut rng, std);
                }
                put(&mut tensors, format!("{p}.attn.wo"), d, d, &mut rng, std);
                ln(&mut tensors, &format!("{p}.attn"), d);
                if stack == "dec" {
                    for h in 0..config.heads {
                        put(&mut tensors, format!("{p}.cross.h{h}.wq"), d, dh, &mut rng, std);
                        put(&mut tensors, format!("{p}.cross.h{h}.wk"), d, dh, &mut rng, std);
                        put(&mut tensors, format!("{p}.cross.h{h}.wv"), d, dh, &mut rng, std);
                    }
                    put(&mut tensors, format!("{p}.cross.wo"), d, d, &mut rng, std);
                    ln(&mut tensors, &format!("{p}.cross"), d);
                }
                put(&mut tensors, format!("{p}.ffn.w1"), d, 4 * d, &mut rng, std);
                put(&mut tensors, format!("{p}.ffn.w2"), 4 * d, d, &mut rng, std);
                ln(&mut tensors, &format!("{p}.ffn"), d);
            }
        }
        put(&mut tensors, "head.vocab".into(), d, config.vocab, &mut rng, std);
        put(&mut tensors, "head.q_proj".into(), d, d, &mut rng, std);
        put(&mut tensors, "head.k_proj".into(), d, d, &mut rng, std);
        Ok(ModelParams { config: config.clone(), tensors })
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors.get_mut(name).expect("unknown parameter")
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Elementwise mean of several parameter sets (f64 accumulation, so
    /// averaging k identical checkpoints is the identity).
    pub fn average(sets: &[ModelParams]) -> Result<ModelParams> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Checkpoint("averaging zero checkpoints".into()))?;
        let mut out = first.clone();
        for (name, t) in out.tensors.iter_mut() {
            let mut acc = vec![0.0f64; t.len()];
            for set in sets {
                let other = set
                    .tensors
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
                for (a, &x) in acc.iter_mut().zip(&other.data) {
                    *a += x as f64;
                }
            }
            for (slot, a) in t.data.iter_mut().zip(acc) {
                *slot = (a / sets.len() as f64) as f32;
            }
        }
        Ok(out)
    }
}

/// Glancing plan: decoder rows to override with target-token embeddings.
#[derive(Clone, Debug)]
pub struct GlancingPlan {
    pub ratio: f64,
    /// (decoder position, target token) pairs along the Viterbi path.
    pub revealed: Vec<(usize, u32)>,
}

/// Linear ratio decay from `r_start` to `r_end` over `span` steps.
#[derive(Clone, Copy, Debug)]
pub struct GlancingSchedule {
    pub r_start: f64,
    pub r_end: f64,
    pub span: usize,
}

impl Default for GlancingSchedule {
    fn default() -> Self {
        GlancingSchedule { r_start: 0.5, r_end: 0.1, span: 3000 }
    }
}

pub fn glancing_ratio(step: usize, schedule: &GlancingSchedule) -> f64 {
    if schedule.span == 0 {
        return schedule.r_end;
    }
    let t = (step as f64 / schedule.span as f64).min(1.0);
    schedule.r_start + (schedule.r_end - schedule.r_start) * t
}

/// Builds a glancing plan by aligning the target to the lattice with
/// Viterbi and revealing round(ratio * n) of the aligned positions,
/// sampled uniformly without replacement.
pub fn glancing_plan(
    lattice: &Lattice,
    target: &[u32],
    ratio: f64,
    constraint: PathConstraint,
    rng: &mut Rng,
) -> Result<GlancingPlan> {
    let path = viterbi_align(lattice, target, constraint)?;
    let n = target.len();
    let reveal = ((ratio * n as f64).round() as usize).min(n);
    let mut chosen = rng.sample_without_replacement(n, reveal);
    chosen.sort_unstable();
    let revealed = chosen
        .into_iter()
        .map(|i| (path.0[i], target[i]))
        .collect();
    Ok(GlancingPlan { ratio, revealed })
}

/// One recorded forward pass: the lattice plus the tape and head nodes for
/// gradient injection.
pub struct ForwardPass {
    pub tape: Tape,
    pub token_node: NodeId,
    pub transition_node: NodeId,
    pub lattice: Lattice,
}

impl ForwardPass {
    /// Runs the backward sweep from a lattice-level gradient (d loss /
    /// d raw logits) and returns per-parameter gradients.
    pub fn backward(&self, grad: &LatticeGrad) -> Result<BTreeMap<String, Tensor>> {
        let token_seed = Tensor::from_vec(
            grad.l,
            grad.v,
            grad.token.iter().map(|&x| x as f32).collect(),
        );
        let trans_seed = Tensor::from_vec(
            grad.l,
            grad.l,
            grad.transition.iter().map(|&x| x as f32).collect(),
        );
        self.tape
            .backward(&[(self.token_node, token_seed), (self.transition_node, trans_seed)])
    }
}

struct Builder<'a> {
    tape: Tape,
    ids: BTreeMap<&'a String, NodeId>,
}

impl<'a> Builder<'a> {
    fn new(params: &'a ModelParams) -> Builder<'a> {
        let mut tape = Tape::new();
        let mut ids = BTreeMap::new();
        for (name, tensor) in params.tensors() {
            ids.insert(name, tape.leaf(name, tensor.clone()));
        }
        Builder { tape, ids }
    }

    fn p(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(&name.to_string())
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    fn attention(
        &mut self,
        prefix: &str,
        queries: NodeId,
        keys_values: NodeId,
        heads: usize,
        dh: usize,
    ) -> Result<NodeId> {
        let mut parts = Vec::with_capacity(heads);
        let scale = 1.0 / (dh as f32).sqrt();
        for h in 0..heads {
            let wq = self.p(&format!("{prefix}.h{h}.wq"));
            let wk = self.p(&format!("{prefix}.h{h}.wk"));
            let wv = self.p(&format!("{prefix}.h{h}.wv"));
            let q = self.tape.matmul(queries, wq)?;
            let k = self.tape.matmul(keys_values, wk)?;
            let v = self.tape.matmul(keys_values, wv)?;
            let scores = self.tape.matmul_nt(q, k)?;
            let scaled = self.tape.scale(scores, scale);
            let attn = self.tape.softmax_rows(scaled);
            parts.push(self.tape.matmul(attn, v)?);
        }
        let merged = self.tape.concat_cols(&parts)?;
        self.tape.matmul(merged, self.p(&format!("{prefix}.wo")))
    }

    fn residual_norm(&mut self, prefix: &str, x: NodeId, sub: NodeId) -> Result<NodeId> {
        let summed = self.tape.add(x, sub)?;
        self.tape
            .layer_norm(summed, self.p(&format!("{prefix}.ln_g")), self.p(&format!("{prefix}.ln_b")))
    }

    fn ffn(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let h1 = self.tape.matmul(x, self.p(&format!("{prefix}.w1")))?;
        let act = self.tape.gelu(h1);
        self.tape.matmul(act, self.p(&format!("{prefix}.w2")))
    }
}

/// Maps a source id sequence to a lattice, recording the tape. Glancing
/// overrides the decoder input at revealed positions with target-token
/// embeddings (positional embeddings still added).
pub fn forward(
    params: &ModelParams,
    src: &[u32],
    glance: Option<&GlancingPlan>,
) -> Result<ForwardPass> {
    let cfg = &params.config;
    let m = src.len();
    if m == 0 {
        return Err(Error::InvalidTarget("empty source".into()));
    }
    if m > cfg.max_src_len {
        return Err(Error::Config(format!(
            "source length {m} exceeds max_src_len {}",
            cfg.max_src_len
        )));
    }
    for &t in src {
        if t as usize >= cfg.vocab {
            return Err(Error::Vocab { id: t, vocab: cfg.vocab });
        }
    }
    let l = cfg.decoder_len(m);
    if l < 2 {
        return Err(Error::InvalidLattice(format!("decoder length {l} < 2")));
    }

    let mut b = Builder::new(params);
    let dh = cfg.d / cfg.heads;

    // encoder
    let src_idx: Vec<usize> = src.iter().map(|&t| t as usize).collect();
    let tok = b.tape.row_gather(b.p("embed.token"), &src_idx)?;
    let pos_idx: Vec<usize> = (0..m).collect();
    let pos = b.tape.row_gather(b.p("embed.enc_pos"), &pos_idx)?;
    let mut x = b.tape.add(tok, pos)?;
    for layer in 0..cfg.layers {
        let p = format!("enc{layer}");
        let attn = b.attention(&format!("{p}.attn"), x, x, cfg.heads, dh)?;
        x = b.residual_norm(&format!("{p}.attn"), x, attn)?;
        let ff = b.ffn(&format!("{p}.ffn"), x)?;
        x = b.residual_norm(&format!("{p}.ffn"), x, ff)?;
    }
    let enc_out = x;

    // decoder input: copy-upsampled encoder states plus positions
    let up_idx: Vec<usize> = (0..l).map(|i| i * m / l).collect();
    let up = b.tape.row_gather(enc_out, &up_idx)?;
    let dpos_idx: Vec<usize> = (0..l).collect();
    let dpos = b.tape.row_gather(b.p("embed.dec_pos"), &dpos_idx)?;
    let mut y = b.tape.add(up, dpos)?;
    if let Some(plan) = glance {
        if !plan.revealed.is_empty() {
            let rows: Vec<usize> = plan.revealed.iter().map(|&(r, _)| r).collect();
            if rows.iter().any(|&r| r >= l) {
                return Err(Error::InvalidPath("glancing row outside decoder".into()));
            }
            let toks: Vec<usize> = plan.revealed.iter().map(|&(_, t)| t as usize).collect();
            let temb = b.tape.row_gather(b.p("embed.token"), &toks)?;
            let pemb = b.tape.row_gather(b.p("embed.dec_pos"), &rows)?;
            let repl = b.tape.add(temb, pemb)?;
            y = b.tape.row_fill(y, repl, &rows)?;
        }
    }
    for layer in 0..cfg.layers {
        let p = format!("dec{layer}");
        let attn = b.attention(&format!("{p}.attn"), y, y, cfg.heads, dh)?;
        y = b.residual_norm(&format!("{p}.attn"), y, attn)?;
        let cross = b.attention(&format!("{p}.cross"), y, enc_out, cfg.heads, dh)?;
        y = b.residual_norm(&format!("{p}.cross"), y, cross)?;
        let ff = b.ffn(&format!("{p}.ffn"), y)?;
        y = b.residual_norm(&format!("{p}.ffn"), y, ff)?;
    }

    // heads
    let token_node = b.tape.matmul(y, b.p("head.vocab"))?;
    let qp = b.tape.matmul(y, b.p("head.q_proj"))?;
    let kp = b.tape.matmul(y, b.p("head.k_proj"))?;
    let raw = b.tape.matmul_nt(qp, kp)?;
    let transition_node = b.tape.scale(raw, 1.0 / (cfg.d as f32).sqrt());

    let lattice = Lattice::from_f32(
        l,
        cfg.vocab,
        &b.tape.value(token_node).data,
        &b.tape.value(transition_node).data,
        cfg.constraint,
    )?;
    Ok(ForwardPass { tape: b.tape, token_node, transition_node, lattice })
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub clip_norm: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 3e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub skipped: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn moments(&self) -> (&BTreeMap<String, Vec<f32>>, &BTreeMap<String, Vec<f32>>) {
        (&self.m, &self.v)
    }

    pub fn restore(
        step: u64,
        skipped: u64,
        m: BTreeMap<String, Vec<f32>>,
        v: BTreeMap<String, Vec<f32>>,
    ) -> AdamState {
        AdamState { step, skipped, m, v }
    }
}

/// Bias-corrected Adam with global-norm clipping. Returns false and leaves
/// everything untouched when any gradient is non-finite.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> bool {
    let mut sq_sum = 0.0f64;
    for g in grads.values() {
        for &x in &g.data {
            sq_sum += (x as f64) * (x as f64);
        }
    }
    if !sq_sum.is_finite() {
        state.skipped += 1;
        return false;
    }
    let norm = sq_sum.sqrt();
    let clip_scale = if hyper.clip_norm > 0.0 && norm > hyper.clip_norm as f64 {
        hyper.clip_norm as f64 / norm
    } else {
        1.0
    } as f32;

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (name, grad) in grads {
        let Some(p) = params.tensors.get_mut(name) else { continue };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
        for i in 0..p.len() {
            let g = grad.data[i] * clip_scale;
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.data[i] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
        }
    }
    true
}

const CKPT_MAGIC: &[u8; 4] = b"CDAT";
const CKPT_VERSION: u32 = 1;

/// Checkpoint: magic "CDAT", version u32 LE, length-prefixed UTF-8
/// key=value config lines, then per-tensor records (name length u16, name
/// bytes, rank u8, dims u32 x rank, f32 LE data). Bit-exact round trip.
pub fn write_checkpoint(
    w: &mut impl Write,
    params: &ModelParams,
    extras: &[(String, String)],
) -> Result<()> {
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    let mut config_block = String::new();
    for (k, v) in params.config.to_pairs().iter().chain(extras) {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Checkpoint(format!("unencodable config key '{k}'")));
        }
        config_block.push_str(k);
        config_block.push('=');
        config_block.push_str(v);
        config_block.push('\n');
    }
    let bytes = config_block.as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    for (name, t) in params.tensors() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[2u8])?;
        w.write_all(&(t.rows as u32).to_le_bytes())?;
        w.write_all(&(t.cols as u32).to_le_bytes())?;
        for &x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(ModelParams, BTreeMap<String, String>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    r.read_exact(&mut b4)?;
    let config_len = u32::from_le_bytes(b4) as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let mut pairs = BTreeMap::new();
    for line in config_text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config line '{line}'")))?;
        pairs.insert(k.to_string(), v.to_string());
    }
    let config = ModelConfig::from_pairs(&pairs)?;

    let mut tensors = BTreeMap::new();
    loop {
        let mut b2 = [0u8; 2];
        match r.read_exact(&mut b2) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u16::from_le_bytes(b2) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        if rank[0] != 2 {
            return Err(Error::Checkpoint(format!("unsupported rank {}", rank[0])));
        }
        r.read_exact(&mut b4)?;
        let rows = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let cols = u32::from_le_bytes(b4) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut b4)?;
            data.push(f32::from_le_bytes(b4));
        }
        tensors.insert(name, Tensor::from_vec(rows, cols, data));
    }
    Ok((ModelParams { config, tensors }, pairs))
}

pub fn save_checkpoint_file(
    path: &FsPath,
    params: &ModelParams,
    extras: &[(String, String)],
) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut file, params, extras)
}

pub fn load_checkpoint_file(path: &FsPath) -> Result<(ModelParams, BTreeMap<String, String>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut file)
}
