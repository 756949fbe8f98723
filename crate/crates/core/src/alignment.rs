//! Support/query alignment.
//!
//! The building block is a residual cross-attention unit: rows of one input
//! attend over rows of the other and the attended values are projected back
//! onto the first input. Query and support features first enhance each other
//! mutually, then the enhanced query is aligned against the enhanced supports
//! through a stack of further blocks, and finally every (support, proposal)
//! pair is scored by channel-wise agreement. All reductions that cross the
//! support axis accumulate in canonical order, so outputs are bitwise
//! independent of support enumeration order.

use crate::diffcore::{DiffError, Graph, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Graph handles of one fully-connected map.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn bind<F: Scalar>(tape: &mut Tape<F>, prefix: &str) -> Result<Self, DiffError> {
        Ok(Self {
            weight: tape.param(&format!("{prefix}.weight"))?,
            bias: tape.param(&format!("{prefix}.bias"))?,
        })
    }
}

/// Registers `prefix.weight` `[in_dim, out_dim]` and `prefix.bias`
/// `[1, out_dim]`.
pub fn register_linear<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    weight_init: impl FnMut() -> F,
) -> Result<(), DiffError> {
    let mut weight_init = weight_init;
    let data: Vec<F> = (0..in_dim * out_dim).map(|_| weight_init()).collect();
    store.register(&format!("{prefix}.weight"), Tensor::new(&[in_dim, out_dim], data)?)?;
    store.register(&format!("{prefix}.bias"), Tensor::zeros(&[1, out_dim]))
}

pub fn linear_value_count(in_dim: usize, out_dim: usize) -> usize {
    in_dim * out_dim + out_dim
}

/// The four maps of one cross-attention block: `c2`/`c3` project the two
/// inputs into the attention space, `c4` produces values, `c1` projects the
/// attended values back onto the first input's channels.
#[derive(Clone, Copy, Debug)]
pub struct BasicBlockVars {
    pub c1: LinearVars,
    pub c2: LinearVars,
    pub c3: LinearVars,
    pub c4: LinearVars,
}

impl BasicBlockVars {
    pub fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        channels: usize,
        attn_dim: usize,
        value_dim: usize,
        mut weight_init: impl FnMut() -> F,
    ) -> Result<(), DiffError> {
        register_linear(store, &format!("{prefix}.c1"), value_dim, channels, &mut weight_init)?;
        register_linear(store, &format!("{prefix}.c2"), channels, attn_dim, &mut weight_init)?;
        register_linear(store, &format!("{prefix}.c3"), channels, attn_dim, &mut weight_init)?;
        register_linear(store, &format!("{prefix}.c4"), channels, value_dim, &mut weight_init)
    }

    pub fn bind<F: Scalar>(tape: &mut Tape<F>, prefix: &str) -> Result<Self, DiffError> {
        Ok(Self {
            c1: LinearVars::bind(tape, &format!("{prefix}.c1"))?,
            c2: LinearVars::bind(tape, &format!("{prefix}.c2"))?,
            c3: LinearVars::bind(tape, &format!("{prefix}.c3"))?,
            c4: LinearVars::bind(tape, &format!("{prefix}.c4"))?,
        })
    }

    pub fn value_count(channels: usize, attn_dim: usize, value_dim: usize) -> usize {
        linear_value_count(value_dim, channels)
            + 2 * linear_value_count(channels, attn_dim)
            + linear_value_count(channels, value_dim)
    }
}

/// Residual cross-attention: rows of `i1` are enhanced by attending over the
/// rows of `i2`. With a zero `c1` the block is exactly the identity on `i1`.
///
/// `logit_scale` optionally multiplies the attention logits before the
/// softmax (off by default at build time).
pub fn basic_block<F: Scalar>(
    g: &mut Graph<F>,
    i1: Var,
    i2: Var,
    p: &BasicBlockVars,
    logit_scale: Option<F>,
) -> Result<Var, DiffError> {
    let queries = g.linear(i1, p.c2.weight, p.c2.bias)?;
    let keys = g.linear(i2, p.c3.weight, p.c3.bias)?;
    let values = g.linear(i2, p.c4.weight, p.c4.bias)?;
    let keys_t = g.transpose(keys)?;
    let mut logits = g.matmul(queries, keys_t)?;
    if let Some(s) = logit_scale {
        logits = g.scale(logits, s);
    }
    let attention = g.softmax_rows(logits)?;
    let context = g.attend(attention, values)?;
    let projected = g.linear(context, p.c1.weight, p.c1.bias)?;
    g.add(projected, i1)
}

/// Mutual enhancement: the query stream attends over supports and the support
/// stream attends over the query, both from the un-enhanced inputs, with
/// independent parameters.
///
/// `fq` is `[R, C]` (one row per proposal or time step), `fs` is `[S*T, C]`
/// (supports stacked along rows). Returns `(enhanced query, enhanced
/// supports)`.
pub fn mutual_enhance<F: Scalar>(
    g: &mut Graph<F>,
    fq: Var,
    fs: Var,
    sq: &BasicBlockVars,
    qs: &BasicBlockVars,
    logit_scale: Option<F>,
) -> Result<(Var, Var), DiffError> {
    let m_sq = basic_block(g, fq, fs, sq, logit_scale)?;
    let m_qs = basic_block(g, fs, fq, qs, logit_scale)?;
    Ok((m_sq, m_qs))
}

/// Bottleneck residual refinement used on the enhanced supports.
#[derive(Clone, Copy, Debug)]
pub struct ResidualVars {
    pub c1: LinearVars,
    pub c2: LinearVars,
}

impl ResidualVars {
    pub fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        channels: usize,
        hidden: usize,
        mut weight_init: impl FnMut() -> F,
    ) -> Result<(), DiffError> {
        register_linear(store, &format!("{prefix}.c1"), hidden, channels, &mut weight_init)?;
        register_linear(store, &format!("{prefix}.c2"), channels, hidden, &mut weight_init)
    }

    pub fn bind<F: Scalar>(tape: &mut Tape<F>, prefix: &str) -> Result<Self, DiffError> {
        Ok(Self {
            c1: LinearVars::bind(tape, &format!("{prefix}.c1"))?,
            c2: LinearVars::bind(tape, &format!("{prefix}.c2"))?,
        })
    }

    pub fn value_count(channels: usize, hidden: usize) -> usize {
        linear_value_count(hidden, channels) + linear_value_count(channels, hidden)
    }
}

/// `r(x) = c1(relu(c2(x))) + x`.
pub fn residual_block<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    p: &ResidualVars,
) -> Result<Var, DiffError> {
    let h = g.linear(x, p.c2.weight, p.c2.bias)?;
    let h = g.relu(h);
    let o = g.linear(h, p.c1.weight, p.c1.bias)?;
    g.add(o, x)
}

/// Progressive alignment: starting from the enhanced query, each depth
/// re-attends over a residually refined view of the enhanced supports. The
/// refinement is computed once and shared across depths; each depth has its
/// own block parameters.
pub fn progressive_align<F: Scalar>(
    g: &mut Graph<F>,
    m_sq: Var,
    m_qs: Var,
    blocks: &[BasicBlockVars],
    res: &ResidualVars,
    logit_scale: Option<F>,
) -> Result<Var, DiffError> {
    let refined = residual_block(g, m_qs, res)?;
    let mut p = m_sq;
    for block in blocks {
        p = basic_block(g, p, refined, block, logit_scale)?;
    }
    Ok(p)
}

/// Match weights between every support and every aligned proposal,
/// `[S, R]`, each entry in `[-0.5, 0.5]`.
pub struct MatchWeights {
    pub var: Var,
    /// Number of (support, proposal) pairs whose cosine was undefined
    /// because one side had zero norm; those entries are 0.
    pub zero_norm_pairs: usize,
}

/// Pools each support's `parts` rows of `m_qs` into one descriptor, then
/// scores every (support, proposal) pair by cosine agreement damped by the
/// logistic of the negated Euclidean distance: `W = cos .* sigmoid(-dist)`.
/// A proposal identical to a support descriptor scores exactly 0.5.
pub fn pairwise_match<F: Scalar>(
    g: &mut Graph<F>,
    p_n: Var,
    m_qs: Var,
    supports: usize,
    parts: usize,
) -> Result<MatchWeights, DiffError> {
    let rows = g.value(m_qs).dims2()?.0;
    if supports == 0 || parts == 0 || rows != supports * parts {
        return Err(DiffError::shape(
            "pairwise_match",
            format!("{rows} support rows cannot split into {supports} x {parts}"),
        ));
    }
    let ranges: Vec<(usize, usize)> = (0..supports)
        .map(|s| (s * parts, (s + 1) * parts))
        .collect();
    let pooled = g.pool_rows(m_qs, &ranges)?;
    let (cos, zero_norm_pairs) = g.pairwise_cosine(p_n, pooled)?;
    let dist = g.pairwise_l2(p_n, pooled)?;
    let neg = g.scale(dist, -F::one());
    let gate = g.sigmoid(neg);
    let var = g.mul(cos, gate)?;
    Ok(MatchWeights {
        var,
        zero_norm_pairs,
    })
}

/// Conditions the aligned proposals on the supports: every proposal row is
/// scaled by its match weight averaged over supports.
pub fn fuse<F: Scalar>(g: &mut Graph<F>, p_n: Var, w: &MatchWeights) -> Result<Var, DiffError> {
    let ap = g.col_mean(w.var)?;
    let ap_t = g.transpose(ap)?;
    g.scale_rows(p_n, ap_t)
}
