//! HGSRCNN graph builders and ablation variants.
//!
//! Network layout for the full model with `n` heterogeneous group blocks:
//!
//! ```text
//! input -> stem conv+relu (O1) -> HGB_1 -> ... -> HGB_n -> (+ O1) -> neck conv+relu
//!       -> per-scale up-sampler -> shared tail conv
//! ```
//!
//! Each HGB runs a symmetric group block (split halves, twin 3-layer chains,
//! concat, relu) in parallel with a full-width 3-layer complementary block,
//! sums them, and refines the sum with a 5-layer chain whose output is added
//! to its own first layer and to the HGB input. The outputs of the first
//! HGB and HGB `n-1` are summed to form the input of HGB `n`.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

use crate::graph::{Graph, GraphBuilder, GraphError, NodeId, NodeKind};
use crate::tensor::{ConvSpec, Dims};

/// Scale factors an up-sampling branch exists for.
pub const SUPPORTED_SCALES: [u32; 3] = [2, 3, 4];

/// Parameter total quoted for the published model; reported, never asserted.
pub const PAPER_REPORTED_PARAMS: usize = 2_178_000;
/// Depth of the default model under the published layer accounting.
pub const PAPER_REPORTED_LAYERS: usize = 52;

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("base channel count {0} must be even and positive")]
    OddChannels(usize),
    #[error("at least one heterogeneous group block is required")]
    NoBlocks,
    #[error("scale {0} is not supported (expected 2, 3 or 4)")]
    UnsupportedScale(u32),
    #[error("controller {controller} must be 0 or one of the configured scales {scales:?}")]
    BadController { controller: u32, scales: Vec<u32> },
    #[error("enhancement anchors ({0}, {1}) must satisfy 1 <= first < second < number of blocks")]
    BadAnchors(usize, usize),
    #[error("unknown variant `{0}` (valid: {valid})", valid = Variant::ALL.iter().map(|v| v.id()).collect::<Vec<_>>().join(", "))]
    UnknownVariant(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Full model and the ablation rows it is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoLse,
    NoLseGse,
    NoGseLseLose,
    NoGseLseLoseRb,
    NoGseLseLoseRbCcb,
    Sgcn,
    Ncn,
}

/// Which optional mechanisms a variant keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mechanisms {
    /// First enhancement branch across HGBs (GE1).
    pub lse: bool,
    /// Second enhancement branch, stem output to last HGB output (GE2).
    pub gse: bool,
    /// Residual from the first refinement layer to the refinement output.
    pub lose: bool,
    pub refinement: bool,
    pub ccb: bool,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoLse,
        Variant::NoLseGse,
        Variant::NoGseLseLose,
        Variant::NoGseLseLoseRb,
        Variant::NoGseLseLoseRbCcb,
        Variant::Sgcn,
        Variant::Ncn,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLse => "no_lse",
            Variant::NoLseGse => "no_lse_gse",
            Variant::NoGseLseLose => "no_gse_lse_lose",
            Variant::NoGseLseLoseRb => "no_gse_lse_lose_rb",
            Variant::NoGseLseLoseRbCcb => "no_gse_lse_lose_rb_ccb",
            Variant::Sgcn => "sgcn",
            Variant::Ncn => "ncn",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::Full => "HGSRCNN",
            Variant::NoLse => "HGSRCNN without local symmetrical enhancement (LSE)",
            Variant::NoLseGse => "HGSRCNN without LSE and global symmetrical enhancement (GSE)",
            Variant::NoGseLseLose => "HGSRCNN without GSE, LSE and local signal enhancement (LOSE)",
            Variant::NoGseLseLoseRb => "HGSRCNN without GSE, LSE, LOSE and refinement block (RB)",
            Variant::NoGseLseLoseRbCcb => "HGSRCNN without GSE, LSE, LOSE, RB and complementary block (CCB)",
            Variant::Sgcn => "symmetric group convolutional network (SGCN)",
            Variant::Ncn => "normal convolutional network (NCN)",
        }
    }

    pub fn code(self) -> u8 {
        Variant::ALL.iter().position(|&v| v == self).expect("listed") as u8
    }

    pub fn from_code(code: u8) -> Option<Variant> {
        Variant::ALL.get(code as usize).copied()
    }

    /// Mechanisms kept by the HGB-based variants; `None` for SGCN and NCN.
    pub fn mechanisms(self) -> Option<Mechanisms> {
        let all = Mechanisms {
            lse: true,
            gse: true,
            lose: true,
            refinement: true,
            ccb: true,
        };
        let m = match self {
            Variant::Full => all,
            Variant::NoLse => Mechanisms { lse: false, ..all },
            Variant::NoLseGse => Mechanisms {
                lse: false,
                gse: false,
                ..all
            },
            Variant::NoGseLseLose => Mechanisms {
                lse: false,
                gse: false,
                lose: false,
                ..all
            },
            Variant::NoGseLseLoseRb => Mechanisms {
                lse: false,
                gse: false,
                lose: false,
                refinement: false,
                ..all
            },
            Variant::NoGseLseLoseRbCcb => Mechanisms {
                lse: false,
                gse: false,
                lose: false,
                refinement: false,
                ccb: false,
            },
            Variant::Sgcn | Variant::Ncn => return None,
        };
        Some(m)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Variant {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.id() == s)
            .ok_or_else(|| ArchError::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub num_hgb: usize,
    pub scales: Vec<u32>,
    /// 0 builds every branch in `scales`; otherwise the single named branch.
    pub controller: u32,
    pub variant: Variant,
    pub image_channels: usize,
    /// HGB pair `(a, b)` whose outputs are summed into the input of HGB `b + 1`.
    /// Defaults to `(1, num_hgb - 1)`.
    pub enhancement_anchors: Option<(usize, usize)>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            num_hgb: 6,
            scales: SUPPORTED_SCALES.to_vec(),
            controller: 0,
            variant: Variant::Full,
            image_channels: 3,
            enhancement_anchors: None,
        }
    }
}

impl ModelConfig {
    /// Small single-scale model used by tests and fixtures.
    pub fn tiny(base_channels: usize, num_hgb: usize, scale: u32) -> Self {
        Self {
            base_channels,
            num_hgb,
            scales: vec![scale],
            controller: scale,
            ..Self::default()
        }
    }

    pub fn sub_channels(&self) -> usize {
        self.base_channels / 2
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(2) {
            return Err(ArchError::OddChannels(self.base_channels));
        }
        if self.num_hgb == 0 {
            return Err(ArchError::NoBlocks);
        }
        if self.scales.is_empty() {
            return Err(ArchError::BadController {
                controller: self.controller,
                scales: vec![],
            });
        }
        if let Some(&s) = self.scales.iter().find(|s| !SUPPORTED_SCALES.contains(s)) {
            return Err(ArchError::UnsupportedScale(s));
        }
        if self.controller != 0 && !self.scales.contains(&self.controller) {
            return Err(ArchError::BadController {
                controller: self.controller,
                scales: self.scales.clone(),
            });
        }
        if let Some((a, b)) = self.enhancement_anchors {
            if !(1 <= a && a < b && b < self.num_hgb) {
                return Err(ArchError::BadAnchors(a, b));
            }
        }
        Ok(())
    }

    /// Scales whose up-sampling branch is built, ascending.
    pub fn branch_scales(&self) -> Vec<u32> {
        if self.controller == 0 {
            let mut s = self.scales.clone();
            s.sort_unstable();
            s.dedup();
            s
        } else {
            vec![self.controller]
        }
    }

    /// GE1 anchor pair in effect, if the model has enough blocks for one.
    pub fn resolved_anchors(&self) -> Option<(usize, usize)> {
        self.enhancement_anchors
            .or_else(|| (self.num_hgb >= 3).then(|| (1, self.num_hgb - 1)))
    }
}

/// Layer index allocator for depth accounting.
struct Depth(usize);

impl Depth {
    fn next(&mut self) -> usize {
        self.0 += 1;
        self.0
    }
}

fn chain(g: &mut GraphBuilder, prefix: &str, input: NodeId, spec_first: ConvSpec, spec_rest: ConvSpec, len: usize, first_layer: usize) -> Vec<NodeId> {
    let mut outs = Vec::with_capacity(len);
    let mut x = input;
    for j in 0..len {
        let spec = if j == 0 { spec_first } else { spec_rest };
        x = g.conv_relu(&format!("{prefix}.conv{}", j + 1), x, spec, first_layer + j);
        outs.push(x);
    }
    outs
}

/// Symmetric group block: split channels, twin 3-layer Conv+ReLU chains at
/// half width, concatenate, trailing ReLU.
pub fn build_sgcb(g: &mut GraphBuilder, prefix: &str, input: NodeId, channels: usize, first_layer: usize) -> Result<NodeId, ArchError> {
    if channels == 0 || !channels.is_multiple_of(2) {
        return Err(ArchError::OddChannels(channels));
    }
    let half = channels / 2;
    let spec = ConvSpec::k3(half, half);
    let upper = g.split_upper(&format!("{prefix}.split_upper"), input);
    let lower = g.split_lower(&format!("{prefix}.split_lower"), input);
    let up = *chain(g, &format!("{prefix}.up"), upper, spec, spec, 3, first_layer).last().expect("3 layers");
    let low = *chain(g, &format!("{prefix}.low"), lower, spec, spec, 3, first_layer).last().expect("3 layers");
    let cat = g.concat(&format!("{prefix}.concat"), up, low);
    Ok(g.relu(&format!("{prefix}.relu"), cat))
}

/// Complementary block: 3 full-width Conv+ReLU layers.
pub fn build_ccb(g: &mut GraphBuilder, prefix: &str, input: NodeId, channels: usize, first_layer: usize) -> NodeId {
    let spec = ConvSpec::k3(channels, channels);
    *chain(g, prefix, input, spec, spec, 3, first_layer).last().expect("3 layers")
}

/// Heterogeneous block: SGCB and CCB on the same input, summed.
pub fn build_hcb(g: &mut GraphBuilder, prefix: &str, input: NodeId, channels: usize, first_layer: usize, with_ccb: bool) -> Result<NodeId, ArchError> {
    let sgcb = build_sgcb(g, &format!("{prefix}.sgcb"), input, channels, first_layer)?;
    if !with_ccb {
        return Ok(sgcb);
    }
    let ccb = build_ccb(g, &format!("{prefix}.ccb"), input, channels, first_layer);
    Ok(g.add(&format!("{prefix}.hcb.add"), &[sgcb, ccb]))
}

/// Refinement block: 5 Conv+ReLU layers; the output adds the first layer's
/// output (when `lose`) and the enclosing HGB's input.
pub fn build_refinement(
    g: &mut GraphBuilder,
    prefix: &str,
    hcb_out: NodeId,
    hgb_input: NodeId,
    channels: usize,
    first_layer: usize,
    lose: bool,
) -> NodeId {
    let spec = ConvSpec::k3(channels, channels);
    let layers = chain(g, prefix, hcb_out, spec, spec, 5, first_layer);
    let mut terms = vec![layers[4]];
    if lose {
        terms.push(layers[0]);
    }
    terms.push(hgb_input);
    g.add(&format!("{prefix}.add"), &terms)
}

fn build_hgb(g: &mut GraphBuilder, index: usize, input: NodeId, channels: usize, depth: &mut Depth, m: Mechanisms) -> Result<NodeId, ArchError> {
    let prefix = format!("hgb{index}");
    let first = depth.0 + 1;
    let hcb = build_hcb(g, &prefix, input, channels, first, m.ccb)?;
    depth.0 += 3;
    if !m.refinement {
        return Ok(hcb);
    }
    let out = build_refinement(g, &format!("{prefix}.rb"), hcb, input, channels, depth.0 + 1, m.lose);
    depth.0 += 5;
    Ok(out)
}

/// Conv + pixel shuffle stages for one scale; x4 is two cascaded x2 stages.
pub fn build_upsampler(g: &mut GraphBuilder, input: NodeId, channels: usize, scale: u32, layer: usize) -> Result<NodeId, ArchError> {
    let stages: &[usize] = match scale {
        2 => &[2],
        3 => &[3],
        4 => &[2, 2],
        s => return Err(ArchError::UnsupportedScale(s)),
    };
    let mut x = input;
    for (k, &r) in stages.iter().enumerate() {
        let suffix = if stages.len() > 1 { format!("{}", k + 1) } else { String::new() };
        let spec = ConvSpec::k3(channels, channels * r * r);
        x = g.conv(&format!("up.x{scale}.conv{suffix}"), x, spec, layer);
        x = g.pixel_shuffle(&format!("up.x{scale}.shuffle{suffix}"), x, r);
    }
    Ok(x)
}

/// Parallel up-sampling plus the shared reconstruction conv for each branch.
fn build_head(g: &mut GraphBuilder, config: &ModelConfig, trunk: NodeId, depth: &mut Depth) -> Result<(), ArchError> {
    let c = config.base_channels;
    let up_layer = depth.next();
    let tail_layer = depth.next();
    let tail = ConvSpec::k3(c, config.image_channels);
    for scale in config.branch_scales() {
        let up = build_upsampler(g, trunk, c, scale, up_layer)?;
        let out = g.conv_shared(&format!("tail.x{scale}"), "tail", up, tail, tail_layer);
        g.output(scale, out);
    }
    Ok(())
}

/// Full HGSRCNN or one of its HGB-based ablations, per `config.variant`.
pub fn build_hgsrcnn(config: &ModelConfig) -> Result<Graph, ArchError> {
    config.validate()?;
    let Some(m) = config.variant.mechanisms() else {
        return build_variant(config.variant, config);
    };
    let c = config.base_channels;
    let (mut g, input) = GraphBuilder::new(config.image_channels);
    let mut depth = Depth(0);
    let o1 = g.conv_relu("stem", input, ConvSpec::k3(config.image_channels, c), depth.next());

    let anchors = if m.lse { config.resolved_anchors() } else { None };
    let mut outputs: Vec<NodeId> = Vec::with_capacity(config.num_hgb);
    let mut x = o1;
    for i in 1..=config.num_hgb {
        if let Some((a, b)) = anchors {
            if i == b + 1 {
                x = g.add("ge1.add", &[outputs[a - 1], outputs[b - 1]]);
            }
        }
        x = build_hgb(&mut g, i, x, c, &mut depth, m)?;
        outputs.push(x);
    }
    if m.gse {
        x = g.add("ge2.add", &[o1, x]);
    }
    let neck = g.conv_relu("neck", x, ConvSpec::k3(c, c), depth.next());
    build_head(&mut g, config, neck, &mut depth)?;
    Ok(g.finish()?)
}

/// Builds `variant` using the widths, scales and controller from `base`.
pub fn build_variant(variant: Variant, base: &ModelConfig) -> Result<Graph, ArchError> {
    let config = ModelConfig {
        variant,
        ..base.clone()
    };
    config.validate()?;
    if variant.mechanisms().is_some() {
        return build_hgsrcnn(&config);
    }
    let c = config.base_channels;
    let (mut g, input) = GraphBuilder::new(config.image_channels);
    let mut depth = Depth(0);
    let stem = g.conv_relu("stem", input, ConvSpec::k3(config.image_channels, c), depth.next());
    let trunk = match variant {
        Variant::Ncn => {
            let spec = ConvSpec::k3(c, c);
            let mut x = stem;
            for j in 2..=5 {
                x = g.conv_relu(&format!("body.conv{j}"), x, spec, depth.next());
            }
            x
        }
        Variant::Sgcn => {
            let first = depth.0 + 1;
            let x = build_sgcb(&mut g, "sgcb", stem, c, first)?;
            depth.0 += 3;
            g.conv_relu("neck", x, ConvSpec::k3(c, c), depth.next())
        }
        _ => unreachable!("HGB variants handled above"),
    };
    build_head(&mut g, &config, trunk, &mut depth)?;
    Ok(g.finish()?)
}

/// Closed-form parameter counts per block, independent of any graph.
pub mod formulas {
    fn conv(cin: usize, cout: usize) -> usize {
        cin * cout * 9 + cout
    }

    pub fn stem(image_channels: usize, c: usize) -> usize {
        conv(image_channels, c)
    }

    pub fn sgcb(c: usize) -> usize {
        2 * 3 * conv(c / 2, c / 2)
    }

    pub fn ccb(c: usize) -> usize {
        3 * conv(c, c)
    }

    pub fn refinement(c: usize) -> usize {
        5 * conv(c, c)
    }

    pub fn neck(c: usize) -> usize {
        conv(c, c)
    }

    pub fn upsampler(c: usize, scale: u32) -> usize {
        match scale {
            2 => conv(c, 4 * c),
            3 => conv(c, 9 * c),
            4 => 2 * conv(c, 4 * c),
            _ => 0,
        }
    }

    pub fn tail(c: usize, image_channels: usize) -> usize {
        conv(c, image_channels)
    }
}

/// Closed-form total for `config`.
pub fn formula_param_count(config: &ModelConfig) -> usize {
    use formulas::*;
    let c = config.base_channels;
    let head: usize = config.branch_scales().iter().map(|&s| upsampler(c, s)).sum::<usize>() + tail(c, config.image_channels);
    let stem = stem(config.image_channels, c);
    match config.variant.mechanisms() {
        Some(m) => {
            let per_hgb = sgcb(c) + if m.ccb { ccb(c) } else { 0 } + if m.refinement { refinement(c) } else { 0 };
            stem + config.num_hgb * per_hgb + neck(c) + head
        }
        None if config.variant == Variant::Ncn => stem + 4 * neck(c) + head,
        None => stem + sgcb(c) + neck(c) + head,
    }
}

/// Depth under the published accounting: `2 + 8 * num_hgb + 1 + 1` for the
/// full model.
pub fn formula_layer_count(config: &ModelConfig) -> usize {
    match config.variant.mechanisms() {
        Some(m) => 2 + config.num_hgb * (3 + if m.refinement { 5 } else { 0 }) + 2,
        None if config.variant == Variant::Ncn => 7,
        None => 7,
    }
}

/// Deterministic plain-text layer table: id, kind, in/out channels, parameters.
pub fn model_summary(graph: &Graph) -> String {
    let dims = graph
        .infer_dims(Dims::new(1, graph.ingress_channels(), 1, 1))
        .expect("finished graphs have consistent channels");
    let mut seen = std::collections::HashSet::new();
    let mut rows = Vec::new();
    let mut total = 0usize;
    for (idx, node) in graph.nodes().iter().enumerate() {
        let cin = node.inputs.iter().map(|&i| dims[i].c).sum::<usize>();
        let cin = if matches!(node.kind, NodeKind::Input) { dims[idx].c } else { cin };
        let cin = match node.kind {
            NodeKind::Add => dims[node.inputs[0]].c,
            _ => cin,
        };
        let params = match &node.kind {
            NodeKind::Conv { spec, param } if seen.insert(param.clone()) => spec.param_count(),
            _ => 0,
        };
        total += params;
        let kind = match &node.kind {
            NodeKind::PixelShuffle(r) => format!("pixel_shuffle(r={r})"),
            NodeKind::Conv { param, .. } if param != &node.id => format!("conv[{param}]"),
            k => k.name().to_string(),
        };
        rows.push((node.id.clone(), kind, cin, dims[idx].c, params));
    }
    let wid = rows.iter().map(|r| r.0.len()).max().unwrap_or(2).max(2);
    let wkind = rows.iter().map(|r| r.1.len()).max().unwrap_or(4).max(4);
    let mut out = String::new();
    let _ = writeln!(out, "{:<wid$}  {:<wkind$}  {:>6}  {:>6}  {:>10}", "id", "kind", "in", "out", "params");
    for (id, kind, cin, cout, params) in rows {
        let _ = writeln!(out, "{id:<wid$}  {kind:<wkind$}  {cin:>6}  {cout:>6}  {params:>10}");
    }
    let _ = writeln!(out, "layers: {}", graph.layer_count());
    let _ = writeln!(out, "parameters: {total}");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{init_parameters, ParameterStore};
    use crate::ops;
    use crate::tensor::Tensor4;

    fn store_prefix_count(store: &ParameterStore<f64>, prefix: &str) -> usize {
        store
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, s)| s.param_count())
            .sum()
    }

    #[test]
    fn default_block_counts_match_enumeration() {
        let config = ModelConfig::default();
        let g = build_hgsrcnn(&config).unwrap();
        let store: ParameterStore<f64> = init_parameters(&g, 0);
        assert_eq!(store_prefix_count(&store, "hgb1.sgcb"), 55_488);
        assert_eq!(formulas::sgcb(64), 55_488);
        assert_eq!(store_prefix_count(&store, "hgb3.ccb"), 110_784);
        assert_eq!(formulas::ccb(64), 110_784);
        assert_eq!(store_prefix_count(&store, "hgb6.rb"), 184_640);
        assert_eq!(formulas::refinement(64), 184_640);
        assert_eq!(store_prefix_count(&store, "stem"), 1_792);
        assert_eq!(store_prefix_count(&store, "neck"), 36_928);
        assert_eq!(store_prefix_count(&store, "tail"), 1_731);
        assert_eq!(store.param_count(), formula_param_count(&config));
    }

    #[test]
    fn sgcb_twins_are_symmetric() {
        let g = build_hgsrcnn(&ModelConfig::default()).unwrap();
        for j in 1..=3 {
            let up = g.node(g.find(&format!("hgb1.sgcb.up.conv{j}")).unwrap());
            let low = g.node(g.find(&format!("hgb1.sgcb.low.conv{j}")).unwrap());
            assert_eq!(up.kind.name(), low.kind.name());
            match (&up.kind, &low.kind) {
                (NodeKind::Conv { spec: a, .. }, NodeKind::Conv { spec: b, .. }) => {
                    assert_eq!(a, b);
                    assert_eq!(a.in_channels, 32);
                }
                _ => panic!("expected convs"),
            }
            assert_eq!(up.layer, low.layer);
        }
        // CCB reads the undivided tensor
        match &g.node(g.find("hgb1.ccb.conv1").unwrap()).kind {
            NodeKind::Conv { spec, .. } => assert_eq!(spec.in_channels, 64),
            _ => panic!(),
        }
    }

    #[test]
    fn hcb_add_fuses_sgcb_and_ccb() {
        let g = build_hgsrcnn(&ModelConfig::default()).unwrap();
        let add = g.node(g.find("hgb2.hcb.add").unwrap());
        assert_eq!(add.inputs, vec![g.find("hgb2.sgcb.relu").unwrap(), g.find("hgb2.ccb.conv3.relu").unwrap()]);
        let adds = g
            .nodes()
            .iter()
            .filter(|n| n.id.starts_with("hgb2.") && n.id.ends_with("hcb.add"))
            .count();
        assert_eq!(adds, 1);

        let no_ccb = build_variant(Variant::NoGseLseLoseRbCcb, &ModelConfig::default()).unwrap();
        assert!(no_ccb.find("hgb2.hcb.add").is_none());
        assert!(no_ccb.find("hgb2.ccb.conv1").is_none());
        // HGB 3 reads the SGCB output of HGB 2 directly
        let next = no_ccb.node(no_ccb.find("hgb3.sgcb.split_upper").unwrap());
        assert_eq!(next.inputs, vec![no_ccb.find("hgb2.sgcb.relu").unwrap()]);
    }

    #[test]
    fn refinement_adds_lose_and_gose() {
        let g = build_hgsrcnn(&ModelConfig::default()).unwrap();
        let add = g.node(g.find("hgb1.rb.add").unwrap());
        assert_eq!(
            add.inputs,
            vec![g.find("hgb1.rb.conv5.relu").unwrap(), g.find("hgb1.rb.conv1.relu").unwrap(), g.find("stem.relu").unwrap()]
        );
        let g = build_variant(Variant::NoGseLseLose, &ModelConfig::default()).unwrap();
        let add = g.node(g.find("hgb1.rb.add").unwrap());
        assert_eq!(add.inputs, vec![g.find("hgb1.rb.conv5.relu").unwrap(), g.find("stem.relu").unwrap()]);
        assert!(g.find("hgb1.rb.conv5").is_some());
    }

    #[test]
    fn zero_network_hgb_is_identity() {
        let config = ModelConfig::tiny(8, 1, 2);
        let g = build_hgsrcnn(&config).unwrap();
        let mut store: ParameterStore<f64> = init_parameters(&g, 1);
        for (key, slot) in store.iter_mut() {
            if key.starts_with("hgb1") {
                slot.weights.fill(0.0);
                slot.bias.iter_mut().for_each(|b| *b = 0.0);
            }
        }
        let x = Tensor4::from_fn(Dims::new(1, 3, 5, 5), |_, c, y, x| ((c + y * 5 + x) % 7) as f64 / 7.0);
        let trace = g.forward(&store, &x).unwrap();
        let hgb_in = trace.value(g.find("stem.relu").unwrap()).unwrap();
        let hgb_out = trace.value(g.find("hgb1.rb.add").unwrap()).unwrap();
        assert_eq!(hgb_in, hgb_out);
    }

    #[test]
    fn enhancement_anchors_default_model() {
        let g = build_hgsrcnn(&ModelConfig::default()).unwrap();
        let ge1 = g.node(g.find("ge1.add").unwrap());
        assert_eq!(ge1.inputs, vec![g.find("hgb1.rb.add").unwrap(), g.find("hgb5.rb.add").unwrap()]);
        let hgb6 = g.node(g.find("hgb6.sgcb.split_upper").unwrap());
        assert_eq!(hgb6.inputs, vec![g.find("ge1.add").unwrap()]);
        let ge2 = g.node(g.find("ge2.add").unwrap());
        assert_eq!(ge2.inputs, vec![g.find("stem.relu").unwrap(), g.find("hgb6.rb.add").unwrap()]);
        let neck = g.node(g.find("neck").unwrap());
        assert_eq!(neck.inputs, vec![g.find("ge2.add").unwrap()]);
    }

    #[test]
    fn anchors_generalize_and_validate() {
        let mut c = ModelConfig::tiny(8, 4, 2);
        let g = build_hgsrcnn(&c).unwrap();
        let ge1 = g.node(g.find("ge1.add").unwrap());
        assert_eq!(ge1.inputs, vec![g.find("hgb1.rb.add").unwrap(), g.find("hgb3.rb.add").unwrap()]);
        c.enhancement_anchors = Some((2, 3));
        let g = build_hgsrcnn(&c).unwrap();
        let ge1 = g.node(g.find("ge1.add").unwrap());
        assert_eq!(ge1.inputs, vec![g.find("hgb2.rb.add").unwrap(), g.find("hgb3.rb.add").unwrap()]);
        c.enhancement_anchors = Some((3, 4));
        assert!(matches!(build_hgsrcnn(&c), Err(ArchError::BadAnchors(3, 4))));
        // too few blocks for distinct anchors: GE1 omitted
        let g = build_hgsrcnn(&ModelConfig::tiny(8, 2, 2)).unwrap();
        assert!(g.find("ge1.add").is_none());
        assert!(g.find("ge2.add").is_some());
    }

    #[test]
    fn upsampler_structure() {
        let g = build_hgsrcnn(&ModelConfig::default()).unwrap();
        let spec_of = |id: &str| match &g.node(g.find(id).unwrap()).kind {
            NodeKind::Conv { spec, .. } => *spec,
            _ => panic!("{id} not a conv"),
        };
        assert_eq!(spec_of("up.x2.conv").out_channels, 256);
        assert_eq!(g.node(g.find("up.x2.shuffle").unwrap()).kind, NodeKind::PixelShuffle(2));
        assert_eq!(spec_of("up.x3.conv").out_channels, 576);
        assert_eq!(g.node(g.find("up.x3.shuffle").unwrap()).kind, NodeKind::PixelShuffle(3));
        assert_eq!(spec_of("up.x4.conv1").out_channels, 256);
        assert_eq!(spec_of("up.x4.conv2").out_channels, 256);
        assert_eq!(g.node(g.find("up.x4.shuffle2").unwrap()).kind, NodeKind::PixelShuffle(2));
        assert_eq!(g.scales(), vec![2, 3, 4]);
        // every branch hangs off the same neck output
        let neck = g.find("neck.relu").unwrap();
        for s in ["up.x2.conv", "up.x3.conv", "up.x4.conv1"] {
            assert_eq!(g.node(g.find(s).unwrap()).inputs, vec![neck]);
        }
    }

    #[test]
    fn scale_law_small() {
        let mut config = ModelConfig::tiny(4, 1, 3);
        config.scales = vec![2, 3, 4];
        let g = build_hgsrcnn(&config).unwrap();
        let store: ParameterStore<f64> = init_parameters(&g, 0);
        let x = Tensor4::zeros(Dims::new(1, 3, 16, 24));
        let out = g.forward(&store, &x).unwrap();
        assert_eq!(out.output(3).unwrap().dims(), Dims::new(1, 3, 48, 72));
        assert_eq!(g.scales(), vec![3]);
    }

    #[test]
    fn layer_accounting() {
        let g = build_hgsrcnn(&ModelConfig::default()).unwrap();
        assert_eq!(g.layer_count(), 52);
        for n in 1..=4 {
            let c = ModelConfig::tiny(8, n, 2);
            let g = build_hgsrcnn(&c).unwrap();
            assert_eq!(g.layer_count(), 2 + 8 * n + 1 + 1);
            assert_eq!(formula_layer_count(&c), g.layer_count());
        }
        let base = ModelConfig::default();
        for v in Variant::ALL {
            let g = build_variant(v, &base).unwrap();
            let c = ModelConfig { variant: v, ..base.clone() };
            assert_eq!(g.layer_count(), formula_layer_count(&c), "{v}");
        }
        assert_eq!(build_variant(Variant::Ncn, &base).unwrap().layer_count(), 7);
    }

    #[test]
    fn no_lse_differs_by_one_edge() {
        let base = ModelConfig::default();
        let full = build_variant(Variant::Full, &base).unwrap();
        let no_lse = build_variant(Variant::NoLse, &base).unwrap();
        // GE1 add node removed: its two input edges go, hgb6 reads hgb5 directly
        assert_eq!(full.nodes().len(), no_lse.nodes().len() + 1);
        assert_eq!(full.edge_count(), no_lse.edge_count() + 2);
        let full_ids: Vec<&str> = full.nodes().iter().map(|n| n.id.as_str()).collect();
        let lse_ids: Vec<&str> = no_lse.nodes().iter().map(|n| n.id.as_str()).filter(|id| *id != "ge1.add").collect();
        assert_eq!(full_ids.iter().filter(|id| **id != "ge1.add").collect::<Vec<_>>(), lse_ids.iter().collect::<Vec<_>>());
    }

    #[test]
    fn sgcn_smaller_than_ncn() {
        let base = ModelConfig::default();
        let sgcn: ParameterStore<f64> = init_parameters(&build_variant(Variant::Sgcn, &base).unwrap(), 0);
        let ncn: ParameterStore<f64> = init_parameters(&build_variant(Variant::Ncn, &base).unwrap(), 0);
        assert!(sgcn.param_count() < ncn.param_count());
        // trunks differ by one SGCB replacing three full-width layers
        assert_eq!(ncn.param_count() - sgcn.param_count(), 3 * 36_928 - 55_488);
    }

    #[test]
    fn ncn_structure() {
        let g = build_variant(Variant::Ncn, &ModelConfig::default()).unwrap();
        let convs: Vec<&str> = g.convs().map(|(_, n, _, _)| n.id.as_str()).take(5).collect();
        assert_eq!(convs, vec!["stem", "body.conv2", "body.conv3", "body.conv4", "body.conv5"]);
        for id in &convs {
            assert!(g.find(&format!("{id}.relu")).is_some());
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.base_channels = 63;
        assert!(matches!(build_hgsrcnn(&c), Err(ArchError::OddChannels(63))));
        let c = ModelConfig {
            controller: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(ArchError::BadController { .. })));
        let c = ModelConfig {
            scales: vec![2, 5],
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(ArchError::UnsupportedScale(5))));
        let c = ModelConfig {
            num_hgb: 0,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(ArchError::NoBlocks)));
        assert!(matches!("bogus".parse::<Variant>(), Err(ArchError::UnknownVariant(_))));
        for v in Variant::ALL {
            assert_eq!(v.id().parse::<Variant>().unwrap(), v);
            assert_eq!(Variant::from_code(v.code()), Some(v));
        }
    }

    #[test]
    fn sgcb_zero_input_zero_output() {
        let (mut b, x) = GraphBuilder::new(8);
        let out = build_sgcb(&mut b, "sgcb", x, 8, 1).unwrap();
        b.output(1, out);
        let g = b.finish().unwrap();
        let mut store: ParameterStore<f64> = init_parameters(&g, 5);
        for (_, slot) in store.iter_mut() {
            slot.bias.iter_mut().for_each(|v| *v = 0.0);
        }
        let trace = g.forward(&store, &Tensor4::zeros(Dims::new(1, 8, 4, 4))).unwrap();
        assert!(trace.output(1).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(build_sgcb(&mut GraphBuilder::new(7).0, "s", 0, 7, 1), Err(ArchError::OddChannels(7))));
    }

    #[test]
    fn manual_composition_matches_graph() {
        // 1-HGB model evaluated by hand from the primitive kernels
        let config = ModelConfig::tiny(4, 1, 2);
        let g = build_hgsrcnn(&config).unwrap();
        let store: ParameterStore<f64> = init_parameters(&g, 17);
        let x = Tensor4::from_fn(Dims::new(1, 3, 6, 5), |_, c, y, x| ((c * 13 + y * 7 + x * 3) % 11) as f64 / 11.0);
        let conv = |key: &str, t: &Tensor4<f64>| {
            let s = store.get(key).unwrap();
            let spec = ConvSpec::k3(s.weights.dims().c, s.weights.dims().n);
            ops::conv2d_forward(t, &s.weights, &s.bias, &spec).unwrap()
        };
        let cr = |key: &str, t: &Tensor4<f64>| ops::relu_forward(&conv(key, t));
        let o1 = cr("stem", &x);
        let (u, l) = ops::split_channels(&o1).unwrap();
        let u = cr("hgb1.sgcb.up.conv3", &cr("hgb1.sgcb.up.conv2", &cr("hgb1.sgcb.up.conv1", &u)));
        let l = cr("hgb1.sgcb.low.conv3", &cr("hgb1.sgcb.low.conv2", &cr("hgb1.sgcb.low.conv1", &l)));
        let sg = ops::relu_forward(&ops::concat_channels(&u, &l).unwrap());
        let cc = cr("hgb1.ccb.conv3", &cr("hgb1.ccb.conv2", &cr("hgb1.ccb.conv1", &o1)));
        let hcb = ops::elementwise_add(&sg, &cc).unwrap();
        let r1 = cr("hgb1.rb.conv1", &hcb);
        let r5 = cr("hgb1.rb.conv5", &cr("hgb1.rb.conv4", &cr("hgb1.rb.conv3", &cr("hgb1.rb.conv2", &r1))));
        let hgb = ops::elementwise_add(&ops::elementwise_add(&r5, &r1).unwrap(), &o1).unwrap();
        let ge2 = ops::elementwise_add(&o1, &hgb).unwrap();
        let neck = cr("neck", &ge2);
        let up = ops::pixel_shuffle(&conv("up.x2.conv", &neck), 2).unwrap();
        let expected = conv("tail", &up);
        let trace = g.forward(&store, &x).unwrap();
        assert_eq!(trace.output(2).unwrap(), &expected);
    }

    #[test]
    fn summary_is_deterministic_and_totals_match() {
        let config = ModelConfig::tiny(8, 1, 2);
        let g = build_hgsrcnn(&config).unwrap();
        let a = model_summary(&g);
        assert_eq!(a, model_summary(&build_hgsrcnn(&config).unwrap()));
        assert!(a.contains(&format!("parameters: {}", formula_param_count(&config))));
        assert!(a.contains("layers: 12"));
        assert!(a.lines().next().unwrap().starts_with("id"));
    }
}
