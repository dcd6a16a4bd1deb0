use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{config_err, Result};
use crate::memory_cell::{CellVars, MemoryCell};
use crate::model::config::{BlockKind, ModelConfig};
use crate::numerics::{Matrix, Tape, Var};

/// How the optimizer treats a parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Matrix weights; the only kind that receives weight decay.
    Weight,
    /// Layer-norm gains and biases.
    Norm,
    /// Gate and momentum scalars.
    Scalar,
    Embedding,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

/// Affine layer-norm parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl LayerNormParams {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Matrix::filled(1, width, 1.0),
            bias: Matrix::zeros(1, width),
        }
    }
}

/// Sublayer after attention.
#[derive(Clone, Debug, PartialEq)]
pub enum SecondBranch {
    Memory(MemoryCell),
    Ffn { w1: Matrix, w2: Matrix },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub ln1: LayerNormParams,
    /// Packed `[W_Q | W_K | W_V]`, H×3H.
    pub w_qkv: Matrix,
    pub w_o: Matrix,
    pub ln2: LayerNormParams,
    pub branch: SecondBranch,
}

impl TransformerBlock {
    pub fn memory(&self) -> Option<&MemoryCell> {
        match &self.branch {
            SecondBranch::Memory(cell) => Some(cell),
            SecondBranch::Ffn { .. } => None,
        }
    }

    pub fn memory_mut(&mut self) -> Option<&mut MemoryCell> {
        match &mut self.branch {
            SecondBranch::Memory(cell) => Some(cell),
            SecondBranch::Ffn { .. } => None,
        }
    }
}

/// Full decoder with tied input/output embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNormParams,
}

/// Read-only view of one parameter group.
pub struct ParamRef<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: (usize, usize),
    pub data: &'a [f64],
}

/// Mutable view of one parameter group.
pub struct ParamMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: (usize, usize),
    pub data: &'a mut [f64],
}

fn push_ref<'a>(out: &mut Vec<ParamRef<'a>>, name: String, kind: ParamKind, m: &'a Matrix) {
    out.push(ParamRef {
        name,
        kind,
        shape: m.shape(),
        data: m.data(),
    });
}

fn push_mut<'a>(out: &mut Vec<ParamMut<'a>>, name: String, kind: ParamKind, m: &'a mut Matrix) {
    let shape = m.shape();
    out.push(ParamMut {
        name,
        kind,
        shape,
        data: m.data_mut(),
    });
}

macro_rules! param_list {
    ($self:ident, $view:ident, $push_m:ident, $scalar:path, $($ref_kw:tt)*) => {{
        let mut out = Vec::new();
        let Model { tok_emb, pos_emb, blocks, ln_f, .. } = $self;
        $push_m(&mut out, "tok_emb".into(), ParamKind::Embedding, tok_emb);
        $push_m(&mut out, "pos_emb".into(), ParamKind::Embedding, pos_emb);
        for (l, block) in blocks.into_iter().enumerate() {
            let TransformerBlock { ln1, w_qkv, w_o, ln2, branch } = block;
            $push_m(&mut out, format!("blocks.{l}.ln1.gain"), ParamKind::Norm, &$($ref_kw)* ln1.gain);
            $push_m(&mut out, format!("blocks.{l}.ln1.bias"), ParamKind::Norm, &$($ref_kw)* ln1.bias);
            $push_m(&mut out, format!("blocks.{l}.attn.w_qkv"), ParamKind::Weight, w_qkv);
            $push_m(&mut out, format!("blocks.{l}.attn.w_o"), ParamKind::Weight, w_o);
            $push_m(&mut out, format!("blocks.{l}.ln2.gain"), ParamKind::Norm, &$($ref_kw)* ln2.gain);
            $push_m(&mut out, format!("blocks.{l}.ln2.bias"), ParamKind::Norm, &$($ref_kw)* ln2.bias);
            match branch {
                SecondBranch::Memory(cell) => {
                    let MemoryCell { bank, edges, nav } = cell;
                    $push_m(&mut out, format!("blocks.{l}.cell.centroids"), ParamKind::Weight, &$($ref_kw)* bank.centroids);
                    $push_m(&mut out, format!("blocks.{l}.cell.ln_c.gain"), ParamKind::Norm, &$($ref_kw)* bank.ln_gain);
                    $push_m(&mut out, format!("blocks.{l}.cell.ln_c.bias"), ParamKind::Norm, &$($ref_kw)* bank.ln_bias);
                    $push_m(&mut out, format!("blocks.{l}.cell.edges"), ParamKind::Weight, &$($ref_kw)* edges.edges);
                    $push_m(&mut out, format!("blocks.{l}.cell.w_q"), ParamKind::Weight, &$($ref_kw)* nav.w_q);
                    $push_m(&mut out, format!("blocks.{l}.cell.w_k"), ParamKind::Weight, &$($ref_kw)* nav.w_k);
                    $push_m(&mut out, format!("blocks.{l}.cell.ln_disp.gain"), ParamKind::Norm, &$($ref_kw)* nav.ln_disp_gain);
                    $push_m(&mut out, format!("blocks.{l}.cell.ln_disp.bias"), ParamKind::Norm, &$($ref_kw)* nav.ln_disp_bias);
                    out.push($view {
                        name: format!("blocks.{l}.cell.gate"),
                        kind: ParamKind::Scalar,
                        shape: (1, 1),
                        data: $scalar(&$($ref_kw)* bank.gate),
                    });
                    out.push($view {
                        name: format!("blocks.{l}.cell.momentum"),
                        kind: ParamKind::Scalar,
                        shape: (1, 1),
                        data: $scalar(&$($ref_kw)* bank.momentum),
                    });
                }
                SecondBranch::Ffn { w1, w2 } => {
                    $push_m(&mut out, format!("blocks.{l}.ffn.w1"), ParamKind::Weight, w1);
                    $push_m(&mut out, format!("blocks.{l}.ffn.w2"), ParamKind::Weight, w2);
                }
            }
        }
        $push_m(&mut out, "ln_f.gain".into(), ParamKind::Norm, &$($ref_kw)* ln_f.gain);
        $push_m(&mut out, "ln_f.bias".into(), ParamKind::Norm, &$($ref_kw)* ln_f.bias);
        out
    }};
}

impl Model {
    /// Fresh model: Gaussian weights and embeddings, unit-sphere centroids,
    /// zero edges, unit/zero layer norms, gate 1.0 and momentum 4.6.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, std) = (config.hidden, config.init_std);
        let tok_emb = Matrix::randn(config.vocab_size, h, std, &mut rng);
        let pos_emb = Matrix::randn(config.max_seq_len, h, std, &mut rng);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let w_qkv = Matrix::randn(h, 3 * h, std, &mut rng);
            let w_o = Matrix::randn(h, h, std, &mut rng);
            let branch = match config.block_kind {
                BlockKind::GraphMemory => SecondBranch::Memory(MemoryCell::new(
                    config.n_slots,
                    h,
                    config.nav_dim,
                    std,
                    &mut rng,
                )),
                BlockKind::DenseFfn => SecondBranch::Ffn {
                    w1: Matrix::randn(h, config.ffn_hidden, std, &mut rng),
                    w2: Matrix::randn(config.ffn_hidden, h, std, &mut rng),
                },
            };
            blocks.push(TransformerBlock {
                ln1: LayerNormParams::new(h),
                w_qkv,
                w_o,
                ln2: LayerNormParams::new(h),
                branch,
            });
        }
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNormParams::new(h),
        })
    }

    /// Every trainable group in canonical order.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        param_list!(self, ParamRef, push_ref, std::slice::from_ref,)
    }

    /// Mutable views in the same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        param_list!(self, ParamMut, push_mut, std::slice::from_mut, mut)
    }

    /// Parameter groups copied out as matrices, canonical order.
    pub fn param_matrices(&self) -> Vec<Matrix> {
        self.params()
            .into_iter()
            .map(|p| Matrix::from_vec(p.shape.0, p.shape.1, p.data.to_vec()).expect("shape"))
            .collect()
    }

    /// Overwrites every group from matrices in canonical order.
    pub fn set_param_matrices(&mut self, values: &[Matrix]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(config_err!(
                "expected {} parameter groups, got {}",
                params.len(),
                values.len()
            ));
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.shape != v.shape() {
                return Err(config_err!(
                    "parameter {} has shape {:?}, got {:?}",
                    p.name,
                    p.shape,
                    v.shape()
                ));
            }
            p.data.copy_from_slice(v.data());
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// Records every group as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let leaves: Vec<Var> = self
            .param_matrices()
            .into_iter()
            .map(|m| tape.leaf(m))
            .collect();
        ModelVars::from_leaves(&self.config, &leaves).expect("canonical layout")
    }
}

/// Tape handles of one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1: (Var, Var),
    pub w_qkv: Var,
    pub w_o: Var,
    pub ln2: (Var, Var),
    pub branch: BranchVars,
}

#[derive(Clone, Copy, Debug)]
pub enum BranchVars {
    Memory(CellVars),
    Ffn { w1: Var, w2: Var },
}

/// Tape handles of all parameters, aligned with [`Model::params`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub ln_f: (Var, Var),
    /// Every handle in canonical order.
    pub all: Vec<Var>,
}

impl ModelVars {
    /// Rebuilds the structured view from leaves in canonical order.
    pub fn from_leaves(config: &ModelConfig, leaves: &[Var]) -> Result<Self> {
        let per_block = match config.block_kind {
            BlockKind::GraphMemory => 16,
            BlockKind::DenseFfn => 8,
        };
        let expected = 4 + per_block * config.n_layers;
        if leaves.len() != expected {
            return Err(config_err!(
                "expected {expected} parameter leaves, got {}",
                leaves.len()
            ));
        }
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("length checked");
        let tok_emb = next();
        let pos_emb = next();
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let ln1 = (next(), next());
            let w_qkv = next();
            let w_o = next();
            let ln2 = (next(), next());
            let branch = match config.block_kind {
                BlockKind::GraphMemory => BranchVars::Memory(CellVars {
                    centroids: next(),
                    ln_c_gain: next(),
                    ln_c_bias: next(),
                    edges: next(),
                    w_q: next(),
                    w_k: next(),
                    ln_disp_gain: next(),
                    ln_disp_bias: next(),
                    gate: next(),
                    momentum: next(),
                }),
                BlockKind::DenseFfn => BranchVars::Ffn {
                    w1: next(),
                    w2: next(),
                },
            };
            blocks.push(BlockVars {
                ln1,
                w_qkv,
                w_o,
                ln2,
                branch,
            });
        }
        let ln_f = (next(), next());
        Ok(Self {
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            all: leaves.to_vec(),
        })
    }
}

/// Closed-form parameter tally.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: u64,
    pub embeddings: u64,
    pub per_block: u64,
    pub blocks: u64,
    pub final_norm: u64,
    /// Per-block components, summing to `per_block`.
    pub block_components: Vec<(String, u64)>,
}

/// Exact trainable parameter count: bias-free linears, affine layer norms,
/// tied output head.
pub fn parameter_count(config: &ModelConfig) -> ParamCount {
    let h = config.hidden as u64;
    let mut parts: Vec<(String, u64)> = vec![
        ("ln1".into(), 2 * h),
        ("attn.w_qkv".into(), 3 * h * h),
        ("attn.w_o".into(), h * h),
        ("ln2".into(), 2 * h),
    ];
    match config.block_kind {
        BlockKind::GraphMemory => {
            let (f, d) = (config.n_slots as u64, config.nav_dim as u64);
            parts.extend([
                ("cell.centroids".into(), f * h),
                ("cell.ln_c".into(), 2 * h),
                ("cell.edges".into(), f * f),
                ("cell.w_q".into(), h * d),
                ("cell.w_k".into(), h * d),
                ("cell.ln_disp".into(), 2 * h),
                ("cell.gate".into(), 1),
                ("cell.momentum".into(), 1),
            ]);
        }
        BlockKind::DenseFfn => {
            let ff = config.ffn_hidden as u64;
            parts.extend([("ffn.w1".into(), h * ff), ("ffn.w2".into(), ff * h)]);
        }
    }
    let per_block: u64 = parts.iter().map(|(_, n)| n).sum();
    let embeddings = (config.vocab_size as u64 + config.max_seq_len as u64) * h;
    let blocks = per_block * config.n_layers as u64;
    let final_norm = 2 * h;
    ParamCount {
        total: embeddings + blocks + final_norm,
        embeddings,
        per_block,
        blocks,
        final_norm,
        block_components: parts,
    }
}
