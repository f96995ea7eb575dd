//! Model graph: per-modality unimodal branches (shared stem, private tail,
//! prediction head), the cross-modal transformer branch that consumes stem
//! features, and extraction of standalone unimodal models.
//!
//! Every parameter belongs to exactly one group: a modality's stem, tail, or
//! head, the multimodal-exclusive group (token projections, the transformer
//! stack, the fused head), or the transfer-auxiliary group (feature
//! projectors that exist only to align widths inside the transfer loss and
//! are discarded at extraction).

use crate::config::{ConfigError, ExperimentConfig, ModalityConfig};
use crate::nn::{
    Conv1dLayer, EncoderBlock, LinearLayer, ParamId, ParamStore, Session, TransformerStack,
};
use crate::objectives::KtMode;
use crate::tensor::{Tensor, TensorError};

pub type ModalityId = usize;

/// Batch labels: one entry per example.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Class(Vec<usize>),
    Value(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Class(v) => v.len(),
            Labels::Value(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A batch of aligned multimodal examples: `views[modality][example]` is one
/// `[channels × length]` grid.
#[derive(Debug, Clone)]
pub struct MultimodalBatch {
    pub views: Vec<Vec<Tensor>>,
    pub labels: Labels,
}

impl MultimodalBatch {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }
}

/// How the joint graph is driven for one pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Full graph; stem features feed both the private tail and the
    /// cross-modal branch.
    Cotrain,
    /// Full graph, but stem features are detached before entering the
    /// cross-modal branch, so its losses cannot move the stems.
    FrozenSharedMm,
    /// Unimodal branches only; multimodal parameters are never bound.
    NoMm,
}

/// Attention maps for a batch: per example, one `[T×T]` row-stochastic
/// tensor per head.
pub type AttnMaps = Vec<Vec<Tensor>>;

/// Outputs of one unimodal branch over a batch. The `kt_*` fields are what
/// the transfer losses see as the student side: identical to the task-side
/// tensors unless transfer gradients are blocked at the stem boundary, in
/// which case they come from a second tail pass on detached stem features.
#[derive(Debug)]
pub struct UniOut {
    pub pred: Tensor,
    pub feat: Tensor,
    pub attn: Option<AttnMaps>,
    pub kt_pred: Tensor,
    pub kt_feat: Tensor,
    pub kt_attn: Option<AttnMaps>,
}

/// Outputs of the cross-modal branch over a batch.
#[derive(Debug)]
pub struct MmOut {
    pub pred: Tensor,
    /// Fused feature (pooled per-modality streams, concatenated), `[B × M·d]`.
    pub feat: Tensor,
    /// Final self-attention maps per modality, when exposed.
    pub attn: Vec<Option<AttnMaps>>,
}

#[derive(Debug)]
pub struct BranchOutputs {
    pub uni: Vec<UniOut>,
    pub mm: Option<MmOut>,
}

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Stem(ModalityId),
    Tail(ModalityId),
    Head(ModalityId),
    /// Token projections, cross-modal stack, fused head.
    MmExclusive,
    /// Feature-transfer projectors; trained by the transfer loss only and
    /// not part of any deployable model.
    KtAux,
}

/// One modality's branch. The stem is the part shared with the cross-modal
/// branch; everything after it is private.
#[derive(Debug)]
pub struct Branch {
    pub name: String,
    pub stem: Vec<Conv1dLayer>,
    /// Optional self-attention over stem tokens at the attach point.
    pub tail_attn: Option<EncoderBlock>,
    pub tail_conv: Vec<Conv1dLayer>,
    pub tail: Vec<LinearLayer>,
    pub head: LinearLayer,
    pub input_shape: [usize; 2],
    /// `[channels, positions]` at the stem/tail attach point.
    pub stem_out: [usize; 2],
    /// Width of the final private feature (input of the head).
    pub feat_width: usize,
    spec: ModalityConfig,
}

impl Branch {
    fn register(
        store: &mut ParamStore,
        mc: &ModalityConfig,
        head_width: usize,
    ) -> Result<Branch, ConfigError> {
        let name = mc.name.clone();
        let mut channels = mc.channels;
        let mut len = mc.length;
        let mut stem = Vec::with_capacity(mc.stem.len());
        for (j, s) in mc.stem.iter().enumerate() {
            let layer = Conv1dLayer::new(
                store,
                &format!("{name}.stem.{j}"),
                channels,
                s.out_channels,
                s.kernel,
                s.stride,
                s.padding,
            );
            len = layer.out_len(len).ok_or_else(|| {
                ConfigError::Invalid(format!(
                    "modality \"{name}\": stem stage {j} leaves no positions"
                ))
            })?;
            channels = s.out_channels;
            stem.push(layer);
        }
        let stem_out = [channels, len];

        let tail_attn = mc.self_attention_tail.then(|| {
            EncoderBlock::new(
                store,
                &format!("{name}.tail.attn"),
                channels,
                1,
                2 * channels,
                true,
            )
        });
        let mut tail_conv = Vec::with_capacity(mc.tail_conv.len());
        for (j, s) in mc.tail_conv.iter().enumerate() {
            let layer = Conv1dLayer::new(
                store,
                &format!("{name}.tail_conv.{j}"),
                channels,
                s.out_channels,
                s.kernel,
                s.stride,
                s.padding,
            );
            len = layer.out_len(len).ok_or_else(|| {
                ConfigError::Invalid(format!(
                    "modality \"{name}\": tail_conv stage {j} leaves no positions"
                ))
            })?;
            channels = s.out_channels;
            tail_conv.push(layer);
        }

        let mut width = channels;
        let mut tail = Vec::with_capacity(mc.tail_hidden.len());
        for (j, w) in mc.tail_hidden.iter().enumerate() {
            tail.push(LinearLayer::new(store, &format!("{name}.tail.{j}"), width, *w));
            width = *w;
        }
        let head = LinearLayer::new(store, &format!("{name}.head"), width, head_width);

        Ok(Branch {
            name,
            stem,
            tail_attn,
            tail_conv,
            tail,
            head,
            input_shape: [mc.channels, mc.length],
            stem_out,
            feat_width: width,
            spec: mc.clone(),
        })
    }

    fn stem_ids(&self) -> Vec<ParamId> {
        self.stem.iter().flat_map(|l| l.param_ids()).collect()
    }

    fn head_ids(&self) -> Vec<ParamId> {
        self.head.param_ids()
    }

    /// Shared stem: conv + relu stages over a `[channels × length]` grid.
    fn stem_forward(&self, sess: &mut Session, x: &Tensor) -> Result<Tensor, TensorError> {
        if *x.shape() != self.input_shape {
            return Err(TensorError::ShapeMismatch {
                op: "stem_forward",
                lhs: x.shape().to_vec(),
                rhs: self.input_shape.to_vec(),
            });
        }
        let mut h = x.clone();
        for layer in &self.stem {
            h = layer.forward(sess, &h)?;
            h = sess.tape.relu(&h)?;
        }
        Ok(h)
    }

    /// Private tail and head over stem features: optional self-attention at
    /// the attach point, private conv stages, pooling over positions, linear
    /// stages, prediction head. Returns `(pred, feat, attention maps)` for
    /// one example.
    fn tail_forward(
        &self,
        sess: &mut Session,
        phi: &Tensor,
    ) -> Result<(Tensor, Tensor, Option<Vec<Tensor>>), TensorError> {
        let mut h = phi.clone();
        let mut attn = None;
        if let Some(block) = &self.tail_attn {
            let tokens = sess.tape.transpose(&h)?;
            let refined = block.forward(sess, &tokens, None)?;
            attn = block.attn.last_probs();
            h = sess.tape.transpose(&refined)?;
        }
        for layer in &self.tail_conv {
            h = layer.forward(sess, &h)?;
            h = sess.tape.relu(&h)?;
        }
        let pooled = sess.tape.mean_pool(&h, &[1])?;
        let mut v = sess.tape.reshape(&pooled, &[1, pooled.numel()])?;
        for layer in &self.tail {
            v = layer.forward(sess, &v)?;
            v = sess.tape.relu(&v)?;
        }
        let pred = self.head.forward(sess, &v)?;
        Ok((pred, v, attn))
    }
}

/// The joint co-training model over all modalities.
#[derive(Debug)]
pub struct CoTrainModel {
    pub store: ParamStore,
    pub names: Vec<String>,
    pub branches: Vec<Branch>,
    /// Per modality: stem channels -> stack width (multimodal-exclusive).
    pub token_projs: Vec<LinearLayer>,
    pub mm_stack: TransformerStack,
    pub mm_head: LinearLayer,
    /// Per modality: feature projector for width-mismatched feature
    /// transfer, `None` when widths already agree or the mode never needs it.
    pub kt_projs: Vec<Option<LinearLayer>>,
    pub cfg: ExperimentConfig,
    groups: Vec<ParamGroup>,
}

/// Build the joint model from a config (re-validated here, so dependent
/// defaults are always applied). Parameter creation order — and therefore
/// the seeded initialization stream — is: per modality stem, tail, head;
/// then token projections; then the cross-modal stack; then the fused head;
/// then feature projectors.
pub fn build_model(cfg: &ExperimentConfig) -> Result<CoTrainModel, ConfigError> {
    let cfg = cfg.clone().validated()?;
    let head_width = cfg.task.head_width();
    let mut store = ParamStore::new();
    let mut groups: Vec<ParamGroup> = Vec::new();
    let mark = |store: &ParamStore, groups: &mut Vec<ParamGroup>, g: ParamGroup| {
        debug_assert!(groups.len() <= store.len());
        groups.resize(store.len(), g);
    };

    let mut branches = Vec::with_capacity(cfg.modalities.len());
    for (i, mc) in cfg.modalities.iter().enumerate() {
        let start = store.len();
        let branch = Branch::register(&mut store, mc, head_width)?;
        // partition boundaries inside the branch registration
        for id in start..store.len() {
            let g = if branch.stem_ids().contains(&id) {
                ParamGroup::Stem(i)
            } else if branch.head_ids().contains(&id) {
                ParamGroup::Head(i)
            } else {
                ParamGroup::Tail(i)
            };
            groups.push(g);
        }
        branches.push(branch);
    }

    let token_projs: Vec<LinearLayer> = branches
        .iter()
        .map(|b| {
            LinearLayer::new(
                &mut store,
                &format!("mm.tokens.{}", b.name),
                b.stem_out[0],
                cfg.mm.d_model,
            )
        })
        .collect();
    let names: Vec<String> = cfg.modality_names();
    let mm_stack = TransformerStack::new(
        &mut store,
        &names,
        cfg.mm.d_model,
        cfg.mm.heads,
        cfg.mm.cross_depth,
        cfg.mm.self_depth,
        cfg.mm.ff_hidden,
        cfg.mm.positional,
        true,
    );
    let mm_feat_width = names.len() * cfg.mm.d_model;
    let mm_head = LinearLayer::new(&mut store, "mm.head", mm_feat_width, head_width);
    mark(&store, &mut groups, ParamGroup::MmExclusive);

    let kt_projs: Vec<Option<LinearLayer>> = branches
        .iter()
        .map(|b| {
            (cfg.kt_mode == KtMode::Feature && b.feat_width != mm_feat_width).then(|| {
                LinearLayer::new(
                    &mut store,
                    &format!("kt.proj.{}", b.name),
                    b.feat_width,
                    mm_feat_width,
                )
            })
        })
        .collect();
    mark(&store, &mut groups, ParamGroup::KtAux);

    assert_eq!(groups.len(), store.len(), "every parameter must be grouped");
    Ok(CoTrainModel {
        store,
        names,
        branches,
        token_projs,
        mm_stack,
        mm_head,
        kt_projs,
        cfg,
        groups,
    })
}

impl CoTrainModel {
    pub fn group_of(&self, id: ParamId) -> ParamGroup {
        self.groups[id]
    }

    pub fn params_in(&self, group: ParamGroup) -> Vec<ParamId> {
        (0..self.store.len()).filter(|id| self.groups[*id] == group).collect()
    }

    pub fn modality_index(&self, name: &str) -> Option<ModalityId> {
        self.names.iter().position(|n| n == name)
    }

    /// Scalar counts per group, in a fixed order: per modality
    /// (stem, tail, head) triples, then the multimodal-exclusive and
    /// transfer-auxiliary groups.
    pub fn partition_scalars(&self) -> Vec<(String, usize)> {
        let count = |g: ParamGroup| {
            self.params_in(g)
                .into_iter()
                .map(|id| self.store.get(id).numel())
                .sum::<usize>()
        };
        let mut out = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            out.push((format!("{name}.stem"), count(ParamGroup::Stem(i))));
            out.push((format!("{name}.tail"), count(ParamGroup::Tail(i))));
            out.push((format!("{name}.head"), count(ParamGroup::Head(i))));
        }
        out.push(("mm".to_string(), count(ParamGroup::MmExclusive)));
        out.push(("kt_aux".to_string(), count(ParamGroup::KtAux)));
        out
    }
}

/// Positions of a `[channels × positions]` feature grid become tokens; a
/// learned projection maps channels to the stack width.
pub fn tokens_from_features(
    sess: &mut Session,
    proj: &LinearLayer,
    phi: &Tensor,
) -> Result<Tensor, TensorError> {
    if phi.shape().len() != 2 {
        return Err(TensorError::Contract {
            op: "tokens_from_features",
            msg: format!("expected a rank-2 feature grid, got {:?}", phi.shape()),
        });
    }
    let tokens = sess.tape.transpose(phi)?;
    proj.forward(sess, &tokens)
}

/// Drive the full graph over a batch. Stem features are computed once per
/// example and feed both the private tail and (mode permitting) the
/// cross-modal branch.
pub fn forward_all(
    model: &CoTrainModel,
    sess: &mut Session,
    batch: &MultimodalBatch,
    mode: ForwardMode,
) -> Result<BranchOutputs, TensorError> {
    let m = model.branches.len();
    if batch.views.len() != m {
        return Err(TensorError::Contract {
            op: "forward_all",
            msg: format!("batch holds {} modalities, model has {m}", batch.views.len()),
        });
    }
    let b = batch.batch_size();
    if b == 0 {
        return Err(TensorError::Contract { op: "forward_all", msg: "empty batch".into() });
    }
    for (i, views) in batch.views.iter().enumerate() {
        if views.len() != b {
            return Err(TensorError::Contract {
                op: "forward_all",
                msg: format!(
                    "modality \"{}\" has {} views for {b} labels",
                    model.names[i],
                    views.len()
                ),
            });
        }
    }

    struct UniAcc {
        preds: Vec<Tensor>,
        feats: Vec<Tensor>,
        attn: Option<AttnMaps>,
        kt_preds: Vec<Tensor>,
        kt_feats: Vec<Tensor>,
        kt_attn: Option<AttnMaps>,
    }
    let mut uni_acc: Vec<UniAcc> = model
        .branches
        .iter()
        .map(|br| UniAcc {
            preds: Vec::with_capacity(b),
            feats: Vec::with_capacity(b),
            attn: br.tail_attn.is_some().then(Vec::new),
            kt_preds: Vec::with_capacity(b),
            kt_feats: Vec::with_capacity(b),
            kt_attn: br.tail_attn.is_some().then(Vec::new),
        })
        .collect();
    let with_mm = mode != ForwardMode::NoMm;
    let mut mm_preds = Vec::with_capacity(if with_mm { b } else { 0 });
    let mut mm_feats = Vec::with_capacity(if with_mm { b } else { 0 });
    let mut mm_attn: Vec<Option<AttnMaps>> = vec![None; m];

    for e in 0..b {
        let mut tokens = Vec::with_capacity(if with_mm { m } else { 0 });
        for (i, br) in model.branches.iter().enumerate() {
            let phi = br.stem_forward(sess, &batch.views[i][e])?;
            let (pred, feat, attn) = br.tail_forward(sess, &phi)?;
            let (kt_pred, kt_feat, kt_attn) = if model.cfg.kt_stop_at_stem {
                br.tail_forward(sess, &phi.detach())?
            } else {
                (pred.clone(), feat.clone(), attn.clone())
            };
            let acc = &mut uni_acc[i];
            acc.preds.push(pred);
            acc.feats.push(feat);
            if let (Some(maps), Some(heads)) = (&mut acc.attn, attn) {
                maps.push(heads);
            }
            acc.kt_preds.push(kt_pred);
            acc.kt_feats.push(kt_feat);
            if let (Some(maps), Some(heads)) = (&mut acc.kt_attn, kt_attn) {
                maps.push(heads);
            }
            if with_mm {
                let phi_mm = if mode == ForwardMode::FrozenSharedMm {
                    phi.detach()
                } else {
                    phi.clone()
                };
                tokens.push(tokens_from_features(sess, &model.token_projs[i], &phi_mm)?);
            }
        }
        if with_mm {
            let (fused, probs) = model.mm_stack.forward(sess, &tokens)?;
            let mut pooled = Vec::with_capacity(m);
            for stream in &fused {
                let p = sess.tape.mean_pool(stream, &[0])?;
                pooled.push(sess.tape.reshape(&p, &[1, p.numel()])?);
            }
            let refs: Vec<&Tensor> = pooled.iter().collect();
            let feat = sess.tape.concat_cols(&refs)?;
            let pred = model.mm_head.forward(sess, &feat)?;
            mm_preds.push(pred);
            mm_feats.push(feat);
            for (i, heads) in probs.into_iter().enumerate() {
                if let Some(heads) = heads {
                    mm_attn[i].get_or_insert_with(Vec::new).push(heads);
                }
            }
        }
    }

    let stack = |sess: &mut Session, rows: &[Tensor]| -> Result<Tensor, TensorError> {
        let refs: Vec<&Tensor> = rows.iter().collect();
        sess.tape.stack_rows(&refs)
    };
    let mut uni = Vec::with_capacity(m);
    for acc in uni_acc {
        uni.push(UniOut {
            pred: stack(sess, &acc.preds)?,
            feat: stack(sess, &acc.feats)?,
            attn: acc.attn,
            kt_pred: stack(sess, &acc.kt_preds)?,
            kt_feat: stack(sess, &acc.kt_feats)?,
            kt_attn: acc.kt_attn,
        });
    }
    let mm = if with_mm {
        Some(MmOut {
            pred: stack(sess, &mm_preds)?,
            feat: stack(sess, &mm_feats)?,
            attn: mm_attn,
        })
    } else {
        None
    };
    Ok(BranchOutputs { uni, mm })
}

/// A standalone unimodal model carved out of the joint graph: the stem,
/// tail, and head of one modality with copied parameters and no multimodal
/// or transfer-auxiliary baggage.
#[derive(Debug)]
pub struct UnimodalModel {
    pub name: String,
    pub store: ParamStore,
    pub branch: Branch,
}

impl UnimodalModel {
    pub fn input_shape(&self) -> [usize; 2] {
        self.branch.input_shape
    }

    /// Logits for one `[channels × length]` example, `[1 × head_width]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut sess = Session::inference(&self.store);
        let phi = self.branch.stem_forward(&mut sess, x)?;
        let (pred, _, _) = self.branch.tail_forward(&mut sess, &phi)?;
        Ok(pred)
    }

    /// Logits for a slice of examples, `[B × head_width]`.
    pub fn predict_batch(&self, xs: &[Tensor]) -> Result<Tensor, TensorError> {
        let mut sess = Session::inference(&self.store);
        let mut rows = Vec::with_capacity(xs.len());
        for x in xs {
            let phi = self.branch.stem_forward(&mut sess, x)?;
            let (pred, _, _) = self.branch.tail_forward(&mut sess, &phi)?;
            rows.push(pred);
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        sess.tape.stack_rows(&refs)
    }
}

/// Copy one modality's branch out of the joint model. The copied parameters
/// are bit-identical, so the standalone forward pass reproduces the joint
/// graph's unimodal predictions exactly.
pub fn extract_unimodal(
    model: &CoTrainModel,
    modality: &str,
) -> Result<UnimodalModel, TensorError> {
    let i = model.modality_index(modality).ok_or_else(|| TensorError::Contract {
        op: "extract_unimodal",
        msg: format!("unknown modality \"{modality}\""),
    })?;
    let src = &model.branches[i];
    let mut store = ParamStore::new();
    let branch = Branch::register(&mut store, &src.spec, model.cfg.task.head_width())
        .map_err(|e| TensorError::Contract { op: "extract_unimodal", msg: e.to_string() })?;
    // same registration order and names: copy by name
    let ids: Vec<(ParamId, String)> = store
        .iter()
        .map(|(id, entry)| (id, entry.name.clone()))
        .collect();
    for (id, name) in ids {
        let src_id = model.store.id_of(&name).ok_or_else(|| TensorError::Contract {
            op: "extract_unimodal",
            msg: format!("parameter \"{name}\" missing from the joint model"),
        })?;
        store.set_data(id, model.store.get(src_id).data.as_ref().clone())?;
    }
    Ok(UnimodalModel { name: modality.to_string(), store, branch })
}
