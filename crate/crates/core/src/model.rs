//! The assembled localizer: parameter registration and initialization, graph
//! binding, and the episode forward pass shared by training and inference.
//!
//! Dataflow per episode: query features feed the class-agnostic proposal
//! subnet; selected proposal features are mutually enhanced with the pooled
//! support parts, progressively aligned, weighted by pairwise matching, and
//! finally classified and regressed by the support-conditioned heads. Both
//! stages carry the same joint loss; training sums them and backpropagates
//! once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{
    fuse, mutual_enhance, pairwise_match, progressive_align, BasicBlockVars, ResidualVars,
};
use crate::diffcore::{DiffError, Graph, ParamStore, Tape, Var};
use crate::features::{
    encode_query, encode_support, inflate_image_support, BackboneKind, BackboneVars, EncoderVars,
};
use crate::heads::{
    build_conditioned_targets, classify_and_regress, joint_loss, HeadOutputs, HeadVars,
    JointLoss, LossTargets, TargetStats,
};
use crate::proposals::{
    clamp_into_extent, generate_anchors, proposal_forward, select_proposals, AnchorConfig,
    AnchorTargets, ProposalBatch, ProposalError, ProposalForward, SelectConfig,
};
use crate::scalar::Scalar;
use crate::temporal::{decode_offsets, OffsetPair, TemporalSegment};

/// Anchor-stage assignment band.
pub const AGNOSTIC_POS_THRESHOLD: f64 = 0.7;
pub const AGNOSTIC_NEG_THRESHOLD: f64 = 0.3;
/// Support-conditioned assignment band.
pub const CONDITIONED_POS_THRESHOLD: f64 = 0.5;
pub const CONDITIONED_NEG_THRESHOLD: f64 = 0.3;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
}

/// Architecture knobs. `paper()` mirrors the published scale; `desk()` is
/// small enough to train in minutes on one core.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Feature width C.
    pub channels: usize,
    /// Raw per-frame input width, used only by the trainable encoder.
    pub input_channels: usize,
    pub backbone: BackboneKind,
    /// Parts per support video (T).
    pub support_parts: usize,
    /// Alignment depth (n).
    pub pam_depth: usize,
    /// Attention width of c2/c3 (d).
    pub attn_dim: usize,
    /// Value width of c4 (d_v).
    pub value_dim: usize,
    /// Bottleneck divisor of the recalibration block (r).
    pub residual_reduction: usize,
    /// Hidden width of the four head towers.
    pub head_hidden: usize,
    /// Scale attention logits by 1/sqrt(d).
    pub logit_scale: bool,
    pub anchors: AnchorConfig,
}

impl ModelConfig {
    pub fn paper() -> Self {
        let channels = 512;
        Self {
            channels,
            input_channels: 3,
            backbone: BackboneKind::Encoder,
            support_parts: 4,
            pam_depth: 3,
            attn_dim: channels / 2,
            value_dim: channels / 2,
            residual_reduction: 4,
            head_hidden: channels / 2,
            logit_scale: false,
            anchors: AnchorConfig::default(),
        }
    }

    pub fn desk() -> Self {
        let channels = 64;
        Self {
            channels,
            backbone: BackboneKind::Passthrough,
            attn_dim: channels / 2,
            value_dim: channels / 2,
            head_hidden: channels / 2,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |detail: &str| Err(ModelError::Config(detail.to_string()));
        if self.channels < 2 {
            return bad("channels must be at least 2");
        }
        if self.channels % self.residual_reduction != 0 {
            return bad("channels must be divisible by residual_reduction");
        }
        if self.attn_dim == 0 || self.value_dim == 0 || self.head_hidden == 0 {
            return bad("attention, value, and head widths must be positive");
        }
        if self.pam_depth == 0 {
            return bad("pam_depth must be at least 1");
        }
        if self.support_parts == 0 {
            return bad("support_parts must be at least 1");
        }
        if self.backbone == BackboneKind::Encoder && self.input_channels == 0 {
            return bad("encoder backbone needs input_channels");
        }
        self.anchors.validate().map_err(ModelError::Proposal)
    }

    fn residual_hidden(&self) -> usize {
        self.channels / self.residual_reduction
    }

    /// Total trainable values. Grows by exactly one basic block per unit of
    /// `pam_depth`.
    pub fn value_count(&self) -> usize {
        let block = BasicBlockVars::value_count(self.channels, self.attn_dim, self.value_dim);
        let backbone = match self.backbone {
            BackboneKind::Passthrough => 0,
            BackboneKind::Encoder => EncoderVars::value_count(self.input_channels, self.channels),
        };
        backbone
            + HeadVars::value_count(3 * self.channels, self.head_hidden)
            + HeadVars::value_count(self.channels, self.head_hidden)
            + (2 + self.pam_depth) * block
            + ResidualVars::value_count(self.channels, self.residual_hidden())
    }

    fn logit_scale_value<F: Scalar>(&self) -> Option<F> {
        self.logit_scale
            .then(|| F::from_f64(1.0 / (self.attn_dim as f64).sqrt()))
    }
}

/// Registers every parameter, zero-valued, in the canonical order. Call
/// [`init_params`] afterwards (or load a checkpoint over the store).
pub fn register_params<F: Scalar>(
    store: &mut ParamStore<F>,
    config: &ModelConfig,
) -> Result<(), ModelError> {
    config.validate()?;
    let zero = || F::zero();
    if config.backbone == BackboneKind::Encoder {
        EncoderVars::register(store, "backbone", config.input_channels, config.channels, zero)?;
    }
    // scoring input is the anchor pool plus two flank pools
    HeadVars::register(store, "prop", 3 * config.channels, config.head_hidden, zero)?;
    BasicBlockVars::register(
        store, "mem.sq", config.channels, config.attn_dim, config.value_dim, zero,
    )?;
    BasicBlockVars::register(
        store, "mem.qs", config.channels, config.attn_dim, config.value_dim, zero,
    )?;
    for k in 0..config.pam_depth {
        BasicBlockVars::register(
            store,
            &format!("pam.k{k}"),
            config.channels,
            config.attn_dim,
            config.value_dim,
            zero,
        )?;
    }
    ResidualVars::register(store, "pam.res", config.channels, config.residual_hidden(), zero)?;
    HeadVars::register(store, "head", config.channels, config.head_hidden, zero)?;
    Ok(())
}

/// Fills every `.weight` with uniform values in ±sqrt(6 / (fan_in + fan_out))
/// and leaves every `.bias` at zero. Deterministic in (seed, store layout);
/// values are drawn in 64-bit and rounded into F so f32 and f64 stores agree.
pub fn init_params<F: Scalar>(store: &mut ParamStore<F>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for (idx, name) in names.iter().enumerate() {
        if !name.ends_with(".weight") {
            continue;
        }
        let tensor = store.tensor_at_mut(idx);
        let (fan_in, fan_out) = tensor.dims2().expect("weights are matrices");
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in tensor.data_mut() {
            *v = F::from_f64(rng.random_range(-limit..limit));
        }
    }
}

/// Fresh store with registered, initialized parameters.
pub fn build_store<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParamStore<F>, ModelError> {
    let mut store = ParamStore::new();
    register_params(&mut store, config)?;
    init_params(&mut store, seed);
    Ok(store)
}

/// Every parameter of the model bound into one graph.
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub prop: HeadVars,
    pub mem_sq: BasicBlockVars,
    pub mem_qs: BasicBlockVars,
    pub pam: Vec<BasicBlockVars>,
    pub pam_res: ResidualVars,
    pub head: HeadVars,
}

pub fn bind_model<F: Scalar>(
    tape: &mut Tape<F>,
    config: &ModelConfig,
) -> Result<ModelVars, DiffError> {
    Ok(ModelVars {
        backbone: BackboneVars::bind(tape, config.backbone)?,
        prop: HeadVars::bind(tape, "prop")?,
        mem_sq: BasicBlockVars::bind(tape, "mem.sq")?,
        mem_qs: BasicBlockVars::bind(tape, "mem.qs")?,
        pam: (0..config.pam_depth)
            .map(|k| BasicBlockVars::bind(tape, &format!("pam.k{k}")))
            .collect::<Result<_, _>>()?,
        pam_res: ResidualVars::bind(tape, "pam.res")?,
        head: HeadVars::bind(tape, "head")?,
    })
}

/// One query: feature rows (or raw frame rows for the encoder backbone),
/// the frames-per-row stride, and the video extent in frames.
#[derive(Clone, Debug)]
pub struct QueryInput<F> {
    pub rows: crate::diffcore::Tensor<F>,
    pub stride: usize,
    pub num_frames: usize,
}

/// One trimmed support clip. `image` inputs must be a single row and are
/// inflated to all parts.
#[derive(Clone, Debug)]
pub struct SupportInput<F> {
    pub rows: crate::diffcore::Tensor<F>,
    pub image: bool,
}

#[derive(Clone, Debug)]
pub struct EpisodeInputs<F> {
    pub query: QueryInput<F>,
    pub supports: Vec<SupportInput<F>>,
}

/// Everything the loss and the predictor need from one episode pass.
pub struct ModelForward {
    pub num_steps: usize,
    /// Frames per feature step after the backbone.
    pub stride: usize,
    pub anchors: Vec<TemporalSegment<f64>>,
    pub prop: ProposalForward,
    pub batch: ProposalBatch,
    pub fused: Var,
    pub head: HeadOutputs,
    /// Support-conditioned refinement of each selected proposal.
    pub refined: Vec<TemporalSegment<f64>>,
    /// Sigmoid of the conditioned classifier, per slot.
    pub probs: Vec<f64>,
    /// Conditioned decodes that needed repair.
    pub clamped: usize,
    /// (support, proposal) pairs with an undefined cosine.
    pub zero_norm_pairs: usize,
    /// Any support was shorter than the part count.
    pub support_padded: bool,
}

pub fn forward<F: Scalar>(
    g: &mut Graph<F>,
    config: &ModelConfig,
    vars: &ModelVars,
    inputs: &EpisodeInputs<F>,
    select: &SelectConfig,
) -> Result<ModelForward, ModelError> {
    if inputs.supports.is_empty() {
        return Err(ModelError::Config("episode has no supports".to_string()));
    }
    let scale = config.logit_scale_value::<F>();

    let query = g.leaf(inputs.query.rows.clone());
    let (fq, stride) = encode_query(g, query, &vars.backbone, inputs.query.stride)?;
    let num_steps = g.value(fq).rows();

    let anchors = generate_anchors(num_steps, inputs.query.num_frames, &config.anchors)?;
    let prop = proposal_forward(g, fq, &anchors, &vars.prop, stride, inputs.query.num_frames)?;
    let scores: Vec<f64> = g
        .value(prop.scores)
        .data()
        .iter()
        .map(|&v| Scalar::to_f64(v))
        .collect();
    let batch = select_proposals(&prop.segments, &scores, select)?;
    let f_q = g.gather_rows(prop.feats, &batch.source)?;

    let mut part_vars = Vec::with_capacity(inputs.supports.len());
    let mut support_padded = false;
    for support in &inputs.supports {
        let rows = g.leaf(support.rows.clone());
        if support.image {
            part_vars.push(inflate_image_support(g, rows, &vars.backbone, config.support_parts)?);
        } else {
            let (parts, padded) = encode_support(g, rows, &vars.backbone, config.support_parts)?;
            support_padded |= padded;
            part_vars.push(parts);
        }
    }
    let fs_flat = g.concat_rows(&part_vars)?;

    let (m_sq, m_qs) = mutual_enhance(g, f_q, fs_flat, &vars.mem_sq, &vars.mem_qs, scale)?;
    let p_n = progressive_align(g, m_sq, m_qs, &vars.pam, &vars.pam_res, scale)?;
    let w = pairwise_match(g, p_n, m_qs, inputs.supports.len(), config.support_parts)?;
    let fused = fuse(g, p_n, &w)?;
    let head = classify_and_regress(g, fused, &vars.head)?;

    let probs_var = g.sigmoid(head.cls_logits);
    let probs: Vec<f64> = g
        .value(probs_var)
        .data()
        .iter()
        .map(|&v| Scalar::to_f64(v))
        .collect();
    let offsets = g.value(head.offsets);
    let mut refined = Vec::with_capacity(batch.len());
    let mut clamped = 0;
    for (r, seg) in batch.segments.iter().enumerate() {
        let pair = OffsetPair {
            d_center: Scalar::to_f64(offsets.at(r, 0)),
            d_log_length: Scalar::to_f64(offsets.at(r, 1)),
        };
        let (decoded, clamp_a) = decode_offsets(seg, &pair);
        let (fitted, clamp_b) = clamp_into_extent(decoded, inputs.query.num_frames as f64);
        if clamp_a || clamp_b {
            clamped += 1;
        }
        refined.push(fitted);
    }

    Ok(ModelForward {
        num_steps,
        stride,
        anchors,
        prop,
        batch,
        fused,
        head,
        refined,
        probs,
        clamped,
        zero_norm_pairs: w.zero_norm_pairs,
        support_padded,
    })
}

/// Both stages of the episode loss, summed into one root.
pub struct EpisodeLoss {
    pub total: Var,
    pub agnostic: JointLoss,
    pub conditioned: JointLoss,
    pub agnostic_stats: TargetStats,
    pub conditioned_stats: TargetStats,
}

fn anchor_targets_to_loss_targets<F: Scalar>(
    t: &AnchorTargets,
) -> Result<(LossTargets<F>, TargetStats), DiffError> {
    let a = t.labels.len();
    let mut stats = TargetStats::default();
    let mut offsets = Vec::with_capacity(a * 2);
    for pair in &t.offsets {
        offsets.push(F::from_f64(pair.d_center));
        offsets.push(F::from_f64(pair.d_log_length));
    }
    for i in 0..a {
        match (t.cls_mask[i], t.labels[i] > 0.5) {
            (true, true) => stats.positives += 1,
            (true, false) => stats.negatives += 1,
            (false, _) => stats.ignored += 1,
        }
    }
    let as_mask = |m: &[bool]| m.iter().map(|&b| if b { F::one() } else { F::zero() }).collect();
    Ok((
        LossTargets {
            labels: crate::diffcore::Tensor::new(
                &[a, 1],
                t.labels.iter().map(|&l| F::from_f64(l)).collect(),
            )?,
            offsets: crate::diffcore::Tensor::new(&[a, 2], offsets)?,
            cls_mask: crate::diffcore::Tensor::new(&[a, 1], as_mask(&t.cls_mask))?,
            reg_mask: crate::diffcore::Tensor::new(&[a, 1], as_mask(&t.reg_mask))?,
        },
        stats,
    ))
}

/// Builds targets for both stages and sums their joint losses. `n_cls` is
/// the batch size (1 per training step); each stage normalizes regression
/// by its own slot count.
pub fn episode_loss<F: Scalar>(
    g: &mut Graph<F>,
    fwd: &ModelForward,
    ground_truth: &[TemporalSegment<f64>],
    n_cls: usize,
) -> Result<EpisodeLoss, ModelError> {
    let anchor_t = crate::proposals::assign_targets(
        &fwd.anchors,
        ground_truth,
        AGNOSTIC_POS_THRESHOLD,
        AGNOSTIC_NEG_THRESHOLD,
    );
    let (agnostic_targets, agnostic_stats) = anchor_targets_to_loss_targets::<F>(&anchor_t)?;
    let agnostic = joint_loss(
        g,
        fwd.prop.logits,
        fwd.prop.offsets,
        &agnostic_targets,
        n_cls,
        fwd.anchors.len(),
    )?;

    let (conditioned_targets, conditioned_stats) = build_conditioned_targets::<F>(
        &fwd.batch.segments,
        &fwd.batch.valid,
        ground_truth,
        CONDITIONED_POS_THRESHOLD,
        CONDITIONED_NEG_THRESHOLD,
    )?;
    let conditioned = joint_loss(
        g,
        fwd.head.cls_logits,
        fwd.head.offsets,
        &conditioned_targets,
        n_cls,
        fwd.batch.len(),
    )?;

    let total = g.add(agnostic.total, conditioned.total)?;
    Ok(EpisodeLoss {
        total,
        agnostic,
        conditioned,
        agnostic_stats,
        conditioned_stats,
    })
}

/// Finite-difference verification of every differentiable piece: the basic
/// block, both enhancement streams, the recalibration block, the full
/// alignment recursion, pairwise matching, fusion, the head towers, the
/// joint loss, and the whole chain composed. Inputs, parameters, and
/// targets are drawn from `seed` at R=4, S=2, T=2, C=8; each entry reports
/// its maximum relative error against central differences in 64-bit.
///
/// Target assignment and proposal selection are deliberately outside the
/// chain: targets are data, not gradient paths.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<(&'static str, f64)>, ModelError> {
    use crate::alignment::{basic_block, residual_block, LinearVars, MatchWeights};
    use crate::diffcore::{gradcheck, Tensor, GRADCHECK_EPS};

    const R: usize = 4;
    const S: usize = 2;
    const T: usize = 2;
    const C: usize = 8;
    const D: usize = C / 2;
    const HIDDEN: usize = C / 2;
    const RES_HIDDEN: usize = C / 4;
    const DEPTH: usize = 3;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    fn tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(&[rows, cols], data).expect("dims match the data")
    }
    // leaf layout helpers: each linear contributes (weight, bias)
    fn linear_leaves(
        rng: &mut ChaCha8Rng,
        leaves: &mut Vec<Tensor<f64>>,
        in_dim: usize,
        out_dim: usize,
    ) {
        leaves.push(tensor(rng, in_dim, out_dim));
        leaves.push(tensor(rng, 1, out_dim));
    }
    fn take_linear(vars: &[Var], at: &mut usize) -> LinearVars {
        let out = LinearVars {
            weight: vars[*at],
            bias: vars[*at + 1],
        };
        *at += 2;
        out
    }
    fn take_block(vars: &[Var], at: &mut usize) -> BasicBlockVars {
        BasicBlockVars {
            c1: take_linear(vars, at),
            c2: take_linear(vars, at),
            c3: take_linear(vars, at),
            c4: take_linear(vars, at),
        }
    }
    fn block_leaves(rng: &mut ChaCha8Rng, leaves: &mut Vec<Tensor<f64>>) {
        linear_leaves(rng, leaves, D, C);
        linear_leaves(rng, leaves, C, D);
        linear_leaves(rng, leaves, C, D);
        linear_leaves(rng, leaves, C, D);
    }
    fn take_head(vars: &[Var], at: &mut usize) -> HeadVars {
        HeadVars {
            cls: crate::heads::TowerVars {
                c0: take_linear(vars, at),
                c1: take_linear(vars, at),
            },
            reg: crate::heads::TowerVars {
                c0: take_linear(vars, at),
                c1: take_linear(vars, at),
            },
        }
    }
    fn head_leaves(rng: &mut ChaCha8Rng, leaves: &mut Vec<Tensor<f64>>) {
        linear_leaves(rng, leaves, C, HIDDEN);
        linear_leaves(rng, leaves, HIDDEN, 1);
        linear_leaves(rng, leaves, C, HIDDEN);
        linear_leaves(rng, leaves, HIDDEN, 2);
    }

    // fixed supervision for the loss entries: two positives, two negatives
    let loss_targets = LossTargets::<f64> {
        labels: Tensor::new(&[R, 1], vec![1.0, 0.0, 1.0, 0.0])?,
        offsets: Tensor::new(&[R, 2], vec![0.2, -0.1, 0.0, 0.0, -0.3, 0.4, 0.0, 0.0])?,
        cls_mask: Tensor::new(&[R, 1], vec![1.0; R])?,
        reg_mask: Tensor::new(&[R, 1], vec![1.0, 0.0, 1.0, 0.0])?,
    };

    let mut results = Vec::new();

    {
        let mut leaves = vec![tensor(&mut rng, R, C), tensor(&mut rng, S * T, C)];
        block_leaves(&mut rng, &mut leaves);
        let err = gradcheck(
            |g, vars| {
                let mut at = 2;
                let p = take_block(vars, &mut at);
                let out = basic_block(g, vars[0], vars[1], &p, None)?;
                Ok(g.sum(out))
            },
            &leaves,
            GRADCHECK_EPS,
        )?;
        results.push(("basic_block", err));
    }

    {
        let mut leaves = vec![tensor(&mut rng, R, C), tensor(&mut rng, S * T, C)];
        block_leaves(&mut rng, &mut leaves);
        block_leaves(&mut rng, &mut leaves);
        let err = gradcheck(
            |g, vars| {
                let mut at = 2;
                let sq = take_block(vars, &mut at);
                let qs = take_block(vars, &mut at);
                let (m_sq, m_qs) = mutual_enhance(g, vars[0], vars[1], &sq, &qs, None)?;
                let a = g.sum(m_sq);
                let b = g.sum(m_qs);
                g.add(a, b).map_err(Into::into)
            },
            &leaves,
            GRADCHECK_EPS,
        )?;
        results.push(("mutual_enhance", err));
    }

    {
        let mut leaves = vec![tensor(&mut rng, S * T, C)];
        linear_leaves(&mut rng, &mut leaves, RES_HIDDEN, C);
        linear_leaves(&mut rng, &mut leaves, C, RES_HIDDEN);
        let err = gradcheck(
            |g, vars| {
                let mut at = 1;
                let p = ResidualVars {
                    c1: take_linear(vars, &mut at),
                    c2: take_linear(vars, &mut at),
                };
                let out = residual_block(g, vars[0], &p)?;
                Ok(g.sum(out))
            },
            &leaves,
            GRADCHECK_EPS,
        )?;
        results.push(("residual_block", err));
    }

    {
        let mut leaves = vec![tensor(&mut rng, R, C), tensor(&mut rng, S * T, C)];
        for _ in 0..DEPTH {
            block_leaves(&mut rng, &mut leaves);
        }
        linear_leaves(&mut rng, &mut leaves, RES_HIDDEN, C);
        linear_leaves(&mut rng, &mut leaves, C, RES_HIDDEN);
        let err = gradcheck(
            |g, vars| {
                let mut at = 2;
                let blocks: Vec<BasicBlockVars> =
                    (0..DEPTH).map(|_| take_block(vars, &mut at)).collect();
                let res = ResidualVars {
                    c1: take_linear(vars, &mut at),
                    c2: take_linear(vars, &mut at),
                };
                let out = progressive_align(g, vars[0], vars[1], &blocks, &res, None)?;
                Ok(g.sum(out))
            },
            &leaves,
            GRADCHECK_EPS,
        )?;
        results.push(("progressive_align", err));
    }

    {
        let leaves = vec![tensor(&mut rng, R, C), tensor(&mut rng, S * T, C)];
        let err = gradcheck(
            |g, vars| {
                let w = pairwise_match(g, vars[0], vars[1], S, T)?;
                Ok(g.sum(w.var))
            },
            &leaves,
            GRADCHECK_EPS,
        )?;
        results.push(("pairwise_match", err));
    }

    {
        let leaves = vec![tensor(&mut rng, R, C), tensor(&mut rng, S, R)];
        let err = gradcheck(
            |g, vars| {
                let w = MatchWeights {
                    var: vars[1],
                    zero_norm_pairs: 0,
                };
                let out = fuse(g, vars[0], &w)?;
                Ok(g.sum(out))
            },
            &leaves,
            GRADCHECK_EPS,
        )?;
        results.push(("fuse", err));
    }

    {
        let mut leaves = vec![tensor(&mut rng, R, C)];
        head_leaves(&mut rng, &mut leaves);
        let err = gradcheck(
            |g, vars| {
                let mut at = 1;
                let head = take_head(vars, &mut at);
                let out = classify_and_regress(g, vars[0], &head)?;
                let a = g.sum(out.cls_logits);
                let b = g.sum(out.offsets);
                g.add(a, b).map_err(Into::into)
            },
            &leaves,
            GRADCHECK_EPS,
        )?;
        results.push(("heads", err));
    }

    {
        let leaves = vec![tensor(&mut rng, R, 1), tensor(&mut rng, R, 2)];
        let targets = loss_targets.clone();
        let err = gradcheck(
            move |g, vars| {
                let loss = joint_loss(g, vars[0], vars[1], &targets, 1, R)?;
                Ok(loss.total)
            },
            &leaves,
            GRADCHECK_EPS,
        )?;
        results.push(("joint_loss", err));
    }

    {
        // the full differentiable chain, parameters included
        let mut leaves = vec![tensor(&mut rng, R, C), tensor(&mut rng, S * T, C)];
        for _ in 0..2 + DEPTH {
            block_leaves(&mut rng, &mut leaves);
        }
        linear_leaves(&mut rng, &mut leaves, RES_HIDDEN, C);
        linear_leaves(&mut rng, &mut leaves, C, RES_HIDDEN);
        head_leaves(&mut rng, &mut leaves);
        let targets = loss_targets.clone();
        let err = gradcheck(
            move |g, vars| {
                let mut at = 2;
                let sq = take_block(vars, &mut at);
                let qs = take_block(vars, &mut at);
                let blocks: Vec<BasicBlockVars> =
                    (0..DEPTH).map(|_| take_block(vars, &mut at)).collect();
                let res = ResidualVars {
                    c1: take_linear(vars, &mut at),
                    c2: take_linear(vars, &mut at),
                };
                let head = take_head(vars, &mut at);
                let (m_sq, m_qs) = mutual_enhance(g, vars[0], vars[1], &sq, &qs, None)?;
                let p_n = progressive_align(g, m_sq, m_qs, &blocks, &res, None)?;
                let w = pairwise_match(g, p_n, m_qs, S, T)?;
                let fused = fuse(g, p_n, &w)?;
                let out = classify_and_regress(g, fused, &head)?;
                let loss = joint_loss(g, out.cls_logits, out.offsets, &targets, 1, R)?;
                Ok(loss.total)
            },
            &leaves,
            GRADCHECK_EPS,
        )?;
        results.push(("composed_chain", err));
    }

    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_episode, Draw, SyntheticConfig};
    use crate::diffcore::Tensor;

    fn desk_config(channels: usize) -> ModelConfig {
        ModelConfig {
            channels,
            attn_dim: channels / 2,
            value_dim: channels / 2,
            head_hidden: channels / 2,
            ..ModelConfig::desk()
        }
    }

    fn synthetic_inputs(
        channels: usize,
        seed: u64,
    ) -> (EpisodeInputs<f64>, Vec<TemporalSegment<f64>>) {
        let config = SyntheticConfig {
            n_supports: 2,
            channels,
            gt_count: 1,
            num_frames: 256,
            support_frames: 64,
            min_gt_steps: 6,
            max_gt_steps: 12,
            seed,
            ..Default::default()
        };
        let out = synthesize_episode(&config, Draw::Seed(seed)).unwrap();
        let inputs = EpisodeInputs {
            query: QueryInput {
                rows: out.query_feats.feats.cast::<f64>(),
                stride: out.query_feats.stride,
                num_frames: out.episode.query_frames,
            },
            supports: out
                .support_feats
                .iter()
                .map(|sf| SupportInput {
                    rows: sf.feats.cast::<f64>(),
                    image: false,
                })
                .collect(),
        };
        (inputs, out.episode.gt_segments)
    }

    #[test]
    fn parameter_names_follow_the_contract() {
        let config = desk_config(16);
        let store = build_store::<f64>(&config, 0).unwrap();
        let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
        for expected in [
            "prop.cls.c0.weight",
            "prop.reg.c1.bias",
            "mem.sq.c1.weight",
            "mem.qs.c4.weight",
            "pam.k0.c1.weight",
            "pam.k2.c4.bias",
            "pam.res.c1.weight",
            "pam.res.c2.bias",
            "head.cls.c1.weight",
            "head.reg.c0.bias",
        ] {
            assert!(names.contains(&expected), "missing {expected}");
        }
        // passthrough backbone registers nothing under backbone.*
        assert!(!names.iter().any(|n| n.starts_with("backbone.")));
        assert_eq!(store.total_values(), config.value_count());

        let with_encoder = ModelConfig {
            backbone: BackboneKind::Encoder,
            input_channels: 3,
            ..desk_config(16)
        };
        let store = build_store::<f64>(&with_encoder, 0).unwrap();
        let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"backbone.l0.weight"));
        assert!(names.contains(&"backbone.l2.bias"));
        assert_eq!(store.total_values(), with_encoder.value_count());
    }

    #[test]
    fn depth_adds_exactly_one_block_of_parameters() {
        for depth in 1..5 {
            let a = ModelConfig {
                pam_depth: depth,
                ..desk_config(16)
            };
            let b = ModelConfig {
                pam_depth: depth + 1,
                ..desk_config(16)
            };
            let grew = b.value_count() - a.value_count();
            assert_eq!(grew, BasicBlockVars::value_count(16, 8, 8));
            // the formula matches what registration actually creates
            let store = build_store::<f64>(&b, 1).unwrap();
            assert_eq!(store.total_values(), b.value_count());
        }
    }

    #[test]
    fn init_is_deterministic_and_leaves_biases_zero() {
        let config = desk_config(16);
        let a = build_store::<f64>(&config, 7).unwrap();
        let b = build_store::<f64>(&config, 7).unwrap();
        let c = build_store::<f64>(&config, 8).unwrap();
        let mut saw_difference = false;
        for ((name, ta), (_, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(ta.data(), tb.data(), "{name} differs across same-seed builds");
        }
        for ((name, ta), (_, tc)) in a.iter().zip(c.iter()) {
            if name.ends_with(".bias") {
                assert!(ta.data().iter().all(|&v| v == 0.0), "{name} bias not zero");
            } else if ta.data() != tc.data() {
                saw_difference = true;
            }
        }
        assert!(saw_difference, "different seeds must differ somewhere");
    }

    #[test]
    fn forward_shapes_and_ranges_hold() {
        let config = desk_config(16);
        let (inputs, _gt) = synthetic_inputs(16, 3);
        let store = build_store::<f64>(&config, 0).unwrap();
        let mut tape = Tape::new(&store);
        let vars = bind_model(&mut tape, &config).unwrap();
        let select = SelectConfig {
            slate: 24,
            ..SelectConfig::train()
        };
        let fwd = forward(&mut tape.graph, &config, &vars, &inputs, &select).unwrap();
        assert_eq!(fwd.num_steps, 32);
        assert_eq!(fwd.stride, 8);
        assert_eq!(fwd.batch.len(), 24);
        assert_eq!(fwd.refined.len(), 24);
        assert_eq!(fwd.probs.len(), 24);
        let (rows, cols) = tape.graph.value(fwd.fused).dims2().unwrap();
        assert_eq!((rows, cols), (24, 16));
        for (p, seg) in fwd.probs.iter().zip(&fwd.refined) {
            assert!(*p > 0.0 && *p < 1.0);
            assert!(seg.start() >= 0.0 && seg.end() <= 256.0);
        }
    }

    #[test]
    fn zeroed_parameters_score_half_and_echo_proposals() {
        let config = desk_config(16);
        let (inputs, _gt) = synthetic_inputs(16, 5);
        let mut store = ParamStore::<f64>::new();
        register_params(&mut store, &config).unwrap();
        let mut tape = Tape::new(&store);
        let vars = bind_model(&mut tape, &config).unwrap();
        let select = SelectConfig {
            slate: 8,
            ..SelectConfig::train()
        };
        let fwd = forward(&mut tape.graph, &config, &vars, &inputs, &select).unwrap();
        for p in &fwd.probs {
            assert_eq!(*p, 0.5);
        }
        for (refined, original) in fwd.refined.iter().zip(&fwd.batch.segments) {
            assert!((refined.start() - original.start()).abs() < 1e-9);
            assert!((refined.end() - original.end()).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_forward() {
        let config = desk_config(16);
        let (inputs, gt) = synthetic_inputs(16, 9);
        let store = build_store::<f64>(&config, 2).unwrap();
        let select = SelectConfig {
            slate: 16,
            ..SelectConfig::train()
        };
        let run = || {
            let mut tape = Tape::new(&store);
            let vars = bind_model(&mut tape, &config).unwrap();
            let fwd = forward(&mut tape.graph, &config, &vars, &inputs, &select).unwrap();
            let loss = episode_loss(&mut tape.graph, &fwd, &gt, 1).unwrap();
            (
                fwd.probs.clone(),
                tape.graph.value(loss.total).data()[0],
            )
        };
        let (probs_a, loss_a) = run();
        let (probs_b, loss_b) = run();
        assert_eq!(probs_a, probs_b);
        assert_eq!(loss_a.to_bits(), loss_b.to_bits());
        assert!(loss_a.is_finite());
    }

    #[test]
    fn image_supports_run_through_the_same_forward() {
        let config = desk_config(16);
        let (mut inputs, _gt) = synthetic_inputs(16, 13);
        // collapse each support to its first row
        for support in &mut inputs.supports {
            let row = support.rows.row(0).to_vec();
            support.rows = Tensor::new(&[1, 16], row).unwrap();
            support.image = true;
        }
        let store = build_store::<f64>(&config, 0).unwrap();
        let mut tape = Tape::new(&store);
        let vars = bind_model(&mut tape, &config).unwrap();
        let select = SelectConfig {
            slate: 8,
            ..SelectConfig::train()
        };
        let fwd = forward(&mut tape.graph, &config, &vars, &inputs, &select).unwrap();
        assert_eq!(fwd.probs.len(), 8);
        assert!(!fwd.support_padded);
    }

    #[test]
    fn loss_stats_count_every_slot() {
        let config = desk_config(16);
        let (inputs, gt) = synthetic_inputs(16, 21);
        let store = build_store::<f64>(&config, 4).unwrap();
        let mut tape = Tape::new(&store);
        let vars = bind_model(&mut tape, &config).unwrap();
        let select = SelectConfig {
            slate: 16,
            ..SelectConfig::train()
        };
        let fwd = forward(&mut tape.graph, &config, &vars, &inputs, &select).unwrap();
        let loss = episode_loss(&mut tape.graph, &fwd, &gt, 1).unwrap();
        let a = loss.agnostic_stats;
        assert_eq!(a.positives + a.negatives + a.ignored, fwd.anchors.len());
        assert!(a.positives >= 1, "argmax rule guarantees a positive anchor");
        let c = loss.conditioned_stats;
        assert_eq!(
            c.positives + c.negatives + c.ignored + c.padded,
            fwd.batch.len()
        );
        let total = tape.graph.value(loss.total).data()[0];
        let parts = tape.graph.value(loss.agnostic.total).data()[0]
            + tape.graph.value(loss.conditioned.total).data()[0];
        assert_eq!(total.to_bits(), parts.to_bits());
    }

    #[test]
    fn every_differentiable_module_passes_gradcheck() {
        let results = gradcheck_suite(17).unwrap();
        let names: Vec<&str> = results.iter().map(|(n, _)| *n).collect();
        assert_eq!(
            names,
            [
                "basic_block",
                "mutual_enhance",
                "residual_block",
                "progressive_align",
                "pairwise_match",
                "fuse",
                "heads",
                "joint_loss",
                "composed_chain",
            ]
        );
        for (name, err) in results {
            assert!(err < 1e-5, "{name} relative error {err}");
        }
    }
}
