//! Learnable networks: a one-block cross-attention composer, the shared
//! contribution decoder, and the per-branch point-weight MLPs that turn
//! contributions into anchors.
//!
//! Parameters live in a flat, named tensor list ([`ComposerParams`]); the
//! layout structs below hold indices into it. Forward passes run on a
//! [`Tape`] over stacked batches: `B` samples of `Q x D` features become one
//! `BQ x D` matrix, and attention never crosses sample boundaries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream_rng, Stream};
use crate::tape::{Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub queries: usize,
    pub dim: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `dim`.
    pub ff_mult: usize,
    /// Point-weight MLP hidden width as a multiple of `queries`.
    pub mlp_mult: usize,
}

impl ModelConfig {
    pub fn new(queries: usize, dim: usize) -> Self {
        Self {
            queries,
            dim,
            heads: 4,
            ff_mult: 4,
            mlp_mult: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 || self.dim == 0 || self.ff_mult == 0 || self.mlp_mult == 0 {
            return Err(Error::InvalidConfig("model sizes must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "dim {} is not divisible into {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionIdx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormIdx {
    pub scale: usize,
    pub offset: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AffineIdx {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedForwardIdx {
    pub up: AffineIdx,
    pub down: AffineIdx,
}

/// Post-norm block: `x = LN(f_r + attn)`, `F_c = LN(x + ff(x))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComposerBlockIdx {
    pub attn: AttentionIdx,
    pub norm_attn: LayerNormIdx,
    pub ff: FeedForwardIdx,
    pub norm_ff: LayerNormIdx,
}

/// Pre-norm decoder layer: `h = f + attn(LN(f), LN(F_c))`, `P = h + ff(LN(h))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderBlockIdx {
    pub norm_query: LayerNormIdx,
    pub norm_memory: LayerNormIdx,
    pub attn: AttentionIdx,
    pub norm_ff: LayerNormIdx,
    pub ff: FeedForwardIdx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PointWeightIdx {
    pub hidden: AffineIdx,
    pub out: AffineIdx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub composer: ComposerBlockIdx,
    pub decoder: DecoderBlockIdx,
    pub weight_ref: PointWeightIdx,
    pub weight_mod: PointWeightIdx,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    /// `N(0, 1 / fan_in)`.
    Scaled,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.inits.push(init);
        self.names.len() - 1
    }

    fn attention(&mut self, p: &str, d: usize) -> AttentionIdx {
        AttentionIdx {
            wq: self.add(format!("{p}.wq"), d, d, Init::Scaled),
            wk: self.add(format!("{p}.wk"), d, d, Init::Scaled),
            wv: self.add(format!("{p}.wv"), d, d, Init::Scaled),
            wo: self.add(format!("{p}.wo"), d, d, Init::Scaled),
        }
    }

    fn norm(&mut self, p: &str, d: usize) -> LayerNormIdx {
        LayerNormIdx {
            scale: self.add(format!("{p}.scale"), 1, d, Init::Ones),
            offset: self.add(format!("{p}.offset"), 1, d, Init::Zeros),
        }
    }

    fn affine(&mut self, p: &str, fan_in: usize, fan_out: usize, weight: Init) -> AffineIdx {
        AffineIdx {
            weight: self.add(format!("{p}.weight"), fan_in, fan_out, weight),
            bias: self.add(format!("{p}.bias"), 1, fan_out, Init::Zeros),
        }
    }

    fn ff(&mut self, p: &str, d: usize, width: usize) -> FeedForwardIdx {
        FeedForwardIdx {
            up: self.affine(&format!("{p}.up"), d, width, Init::Scaled),
            down: self.affine(&format!("{p}.down"), width, d, Init::Scaled),
        }
    }

    fn point_weight(&mut self, p: &str, q: usize, hidden: usize, d: usize) -> PointWeightIdx {
        PointWeightIdx {
            hidden: self.affine(&format!("{p}.hidden"), q, hidden, Init::Scaled),
            out: self.affine(&format!("{p}.out"), hidden, d, Init::Zeros),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Builder) {
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let (q, d) = (cfg.queries, cfg.dim);
    let width = cfg.ff_mult * d;
    let composer = ComposerBlockIdx {
        attn: b.attention("composer.attn", d),
        norm_attn: b.norm("composer.norm_attn", d),
        ff: b.ff("composer.ff", d, width),
        norm_ff: b.norm("composer.norm_ff", d),
    };
    let decoder = DecoderBlockIdx {
        norm_query: b.norm("decoder.norm_query", d),
        norm_memory: b.norm("decoder.norm_memory", d),
        attn: b.attention("decoder.attn", d),
        norm_ff: b.norm("decoder.norm_ff", d),
        ff: b.ff("decoder.ff", d, width),
    };
    let hidden = cfg.mlp_mult * q;
    let weight_ref = b.point_weight("weight_ref", q, hidden, d);
    let weight_mod = b.point_weight("weight_mod", q, hidden, d);
    (
        Layout {
            composer,
            decoder,
            weight_ref,
            weight_mod,
        },
        b,
    )
}

/// All learnable tensors, in a fixed order with stable names.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposerParams {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ComposerParams {
    /// Scaled-normal projections, unit layer-norm scales, zero biases and a
    /// zero final point-weight layer (so every gate starts at 0.5).
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, b) = build_layout(config);
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let values = b
            .shapes
            .iter()
            .zip(&b.inits)
            .map(|(&(r, c), init)| match init {
                Init::Zeros => Matrix::zeros(r, c),
                Init::Ones => Matrix::filled(r, c, 1.0),
                Init::Scaled => Matrix::random_normal(r, c, 1.0 / (r as f64).sqrt(), &mut rng),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layout,
            names: b.names,
            values,
        })
    }

    /// Rebuilds from a named table; names and shapes must match the layout.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Matrix)>) -> Result<Self> {
        config.validate()?;
        let (layout, b) = build_layout(config);
        if named.len() != b.names.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                b.names.len(),
                named.len()
            )));
        }
        let mut values = Vec::with_capacity(named.len());
        for ((name, m), (want, &shape)) in named.into_iter().zip(b.names.iter().zip(&b.shapes)) {
            if &name != want || m.shape() != shape {
                return Err(Error::InvalidArgument(format!(
                    "parameter {name} {:?} does not match expected {want} {shape:?}",
                    m.shape()
                )));
            }
            values.push(m);
        }
        Ok(Self {
            config: config.clone(),
            layout,
            names: b.names,
            values,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Adds `N(0, std^2)` noise to every entry; used to move off the
    /// zero-initialized gates when probing gradients.
    pub fn perturb<R: Rng>(&mut self, std: f64, rng: &mut R) {
        for m in &mut self.values {
            let noise = Matrix::random_normal(m.rows(), m.cols(), std, rng);
            m.add_assign(&noise);
        }
    }

    /// Registers every tensor on the tape; `trainable` selects `param` vs `constant`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|m| {
                if trainable {
                    tape.param(m.clone())
                } else {
                    tape.constant(m.clone())
                }
            })
            .collect()
    }
}

/// Parameter handles on a tape.
#[derive(Clone, Copy)]
pub struct Net<'a> {
    pub config: &'a ModelConfig,
    pub layout: &'a Layout,
    pub vars: &'a [Var],
}

impl<'a> Net<'a> {
    pub fn new(params: &'a ComposerParams, vars: &'a [Var]) -> Self {
        Self {
            config: &params.config,
            layout: &params.layout,
            vars,
        }
    }

    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn norm(&self, tape: &mut Tape, x: Var, p: LayerNormIdx) -> Result<Var> {
        let n = tape.layer_norm(x, LAYER_NORM_EPS)?;
        let s = tape.mul_row(n, self.v(p.scale))?;
        tape.add_row(s, self.v(p.offset))
    }

    fn affine(&self, tape: &mut Tape, x: Var, p: AffineIdx) -> Result<Var> {
        tape.affine(x, self.v(p.weight), self.v(p.bias))
    }

    fn ff(&self, tape: &mut Tape, x: Var, p: FeedForwardIdx) -> Result<Var> {
        let h = self.affine(tape, x, p.up)?;
        let h = tape.softplus(h)?;
        self.affine(tape, h, p.down)
    }

    fn attention(&self, tape: &mut Tape, query: Var, memory: Var, p: AttentionIdx) -> Result<Var> {
        let q = tape.matmul(query, self.v(p.wq))?;
        let k = tape.matmul(memory, self.v(p.wk))?;
        let v = tape.matmul(memory, self.v(p.wv))?;
        let block = self.config.queries;
        let a = tape.block_attention(q, k, v, self.config.heads, block, block)?;
        tape.matmul(a, self.v(p.wo))
    }

    fn check_pair(&self, tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (am, bm) = (tape.value(a), tape.value(b));
        let (q, d) = (self.config.queries, self.config.dim);
        if am.shape() != bm.shape() || am.cols() != d || am.rows() % q != 0 {
            return Err(Error::ShapeMismatch {
                op,
                left: am.shape(),
                right: bm.shape(),
            });
        }
        Ok(())
    }

    /// Composed feature `F_c` from stacked `f_r`, `f_m`.
    pub fn compose(&self, tape: &mut Tape, f_r: Var, f_m: Var) -> Result<Var> {
        self.check_pair(tape, f_r, f_m, "compose")?;
        let p = self.layout.composer;
        let a = self.attention(tape, f_r, f_m, p.attn)?;
        let x = tape.add(f_r, a)?;
        let x = self.norm(tape, x, p.norm_attn)?;
        let f = self.ff(tape, x, p.ff)?;
        let y = tape.add(x, f)?;
        self.norm(tape, y, p.norm_ff)
    }

    /// Contribution of `f_query` to the composed feature `f_c`.
    pub fn disentangle(&self, tape: &mut Tape, f_query: Var, f_c: Var) -> Result<Var> {
        self.check_pair(tape, f_query, f_c, "disentangle")?;
        let p = self.layout.decoder;
        let q = self.norm(tape, f_query, p.norm_query)?;
        let m = self.norm(tape, f_c, p.norm_memory)?;
        let a = self.attention(tape, q, m, p.attn)?;
        let h = tape.add(f_query, a)?;
        let n = self.norm(tape, h, p.norm_ff)?;
        let f = self.ff(tape, n, p.ff)?;
        tape.add(h, f)
    }

    /// Gates in `(0, 1)` from the per-sample `Q x Q` table `F_c f_branch^T`,
    /// scaled by `1/sqrt(D)` like attention scores.
    pub fn point_weights(&self, tape: &mut Tape, f_c: Var, f_branch: Var, mlp: PointWeightIdx) -> Result<Var> {
        self.check_pair(tape, f_c, f_branch, "point_weights")?;
        let q = self.config.queries;
        let table = tape.block_matmul_nt(f_c, f_branch, q, q)?;
        let table = tape.scale(table, 1.0 / (self.config.dim as f64).sqrt())?;
        let h = self.affine(tape, table, mlp.hidden)?;
        let h = tape.softplus(h)?;
        let logits = self.affine(tape, h, mlp.out)?;
        tape.sigmoid(logits)
    }
}

/// `F_c + W ⊙ P`.
pub fn anchor(tape: &mut Tape, f_c: Var, weights: Var, contribution: Var) -> Result<Var> {
    let wp = tape.mul(weights, contribution)?;
    tape.add(f_c, wp)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub a_r: Matrix,
    pub a_m: Matrix,
    pub p_r: Matrix,
    pub p_m: Matrix,
    pub w_r: Matrix,
    pub w_m: Matrix,
}

/// Plain-matrix anchor assembly.
pub fn build_anchors(f_c: &Matrix, p_r: &Matrix, p_m: &Matrix, w_r: &Matrix, w_m: &Matrix) -> Result<AnchorSet> {
    let a_r = f_c.add(&w_r.hadamard(p_r)?)?;
    let a_m = f_c.add(&w_m.hadamard(p_m)?)?;
    Ok(AnchorSet {
        a_r,
        a_m,
        p_r: p_r.clone(),
        p_m: p_m.clone(),
        w_r: w_r.clone(),
        w_m: w_m.clone(),
    })
}

fn run<F>(params: &ComposerParams, inputs: &[&Matrix], f: F) -> Result<Matrix>
where
    F: FnOnce(&Net, &mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let xs: Vec<Var> = inputs.iter().map(|m| tape.constant((*m).clone())).collect();
    let net = Net::new(params, &vars);
    let out = f(&net, &mut tape, &xs)?;
    Ok(tape.value(out).clone())
}

/// Untracked composer forward on one sample or a stack of samples.
pub fn compose(f_r: &Matrix, f_m: &Matrix, params: &ComposerParams) -> Result<Matrix> {
    run(params, &[f_r, f_m], |net, t, x| net.compose(t, x[0], x[1]))
}

pub fn disentangle(f_query: &Matrix, f_c: &Matrix, params: &ComposerParams) -> Result<Matrix> {
    run(params, &[f_query, f_c], |net, t, x| net.disentangle(t, x[0], x[1]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Reference,
    Modification,
}

pub fn point_weights(f_c: &Matrix, f_branch: &Matrix, params: &ComposerParams, branch: Branch) -> Result<Matrix> {
    let mlp = match branch {
        Branch::Reference => params.layout.weight_ref,
        Branch::Modification => params.layout.weight_mod,
    };
    run(params, &[f_c, f_branch], |net, t, x| net.point_weights(t, x[0], x[1], mlp))
}
