//! The full dual-branch network: configuration with ablation flags, the
//! five-level hybrid encoder, the interleaved CNN/KAN decoder, and the
//! training step.

use std::rc::Rc;

use crate::conv::{
    conv2d, depthwise_conv2d, transposed_conv2d, ConvParams, LdconvParams,
};
use crate::fusion::{
    cci_forward, sfe_forward, sfe_gaf_forward, CciParams, SfeGafParams, SfeParams,
};
use crate::init::{const_param, zeros_param, Prng};
use crate::kan::{
    kan_channel_mix, kanconv_block_forward, KanConvBlockParams, KanLinearLayer, SplineGrid,
};
use crate::network::blocks::{
    kat_block_forward, residual_block_forward, vit_block_forward, AttnParams, KatBlockParams,
    LinearParams, ResidualBlockParams, VitBlockParams,
};
use crate::network::loss::composite_loss;
use crate::network::optim::{clip_global_norm, AdamW};
use crate::ops::{
    batchnorm, concat0, relu, reshape, scale, slice0, softmax_along, transpose2d, BnState,
};
use crate::tensor::Tensor;
use rand::SeedableRng;

/// Table-1 ablation switches. All off is the plain U-Net baseline (A).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    /// Dual-branch encoder: adds the transformer branch next to the CNN branch.
    pub use_transformer: bool,
    /// Hybrid encoder: Kolmogorov-Arnold modules (KANConv + KAT) at levels 3 and 5.
    pub use_hdbe: bool,
    /// Cross-branch channel interaction at every dual-branch level.
    pub use_cci: bool,
    /// Semantic-fusion-enhancement skip modules instead of plain concatenation.
    pub use_sfe: bool,
    /// Deformable (LDConv) variant of SFE at the Kolmogorov-Arnold levels.
    pub use_gaf: bool,
    /// Interleave KAN decoder blocks with CNN decoder blocks.
    pub use_kan_decoder: bool,
}

impl AblationFlags {
    pub fn none() -> AblationFlags {
        AblationFlags {
            use_transformer: false,
            use_hdbe: false,
            use_cci: false,
            use_sfe: false,
            use_gaf: false,
            use_kan_decoder: false,
        }
    }

    /// Cumulative ablation presets A..H:
    /// A = plain U-Net; B = A + transformer branch; C = B + KAN decoder;
    /// D = C + hybrid encoder; E = D + CCI; F = D + SFE; G = D + CCI + SFE;
    /// H = G + deformable skip fusion (the full network).
    pub fn preset(letter: char) -> AblationFlags {
        let mut f = AblationFlags::none();
        match letter {
            'A' => {}
            'B' => {
                f.use_transformer = true;
            }
            'C' => {
                f.use_transformer = true;
                f.use_kan_decoder = true;
            }
            'D' => {
                f.use_transformer = true;
                f.use_kan_decoder = true;
                f.use_hdbe = true;
            }
            'E' => {
                f = AblationFlags::preset('D');
                f.use_cci = true;
            }
            'F' => {
                f = AblationFlags::preset('D');
                f.use_sfe = true;
            }
            'G' => {
                f = AblationFlags::preset('D');
                f.use_cci = true;
                f.use_sfe = true;
            }
            'H' => {
                f = AblationFlags::preset('G');
                f.use_gaf = true;
            }
            other => panic!("unknown ablation preset '{other}' (expected A..H)"),
        }
        f
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NetworkConfig {
    /// Channel width of encoder level 1; the CNN branch doubles per level.
    pub base_channels: usize,
    pub seed: u64,
    pub flags: AblationFlags,
}

impl NetworkConfig {
    pub fn new(base_channels: usize, seed: u64, flags: AblationFlags) -> NetworkConfig {
        assert!(
            base_channels >= 2 && base_channels % 2 == 0,
            "base_channels {base_channels} must be even and at least 2"
        );
        if flags.use_cci || flags.use_sfe {
            assert!(
                flags.use_transformer,
                "CCI/SFE operate across branches and require use_transformer"
            );
        }
        if flags.use_gaf {
            assert!(flags.use_sfe, "use_gaf is a variant of SFE and requires use_sfe");
        }
        NetworkConfig { base_channels, seed, flags }
    }

    /// CNN-branch channel counts at levels 1..5.
    pub fn cnn_channels(&self) -> [usize; 5] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 8 * b, 16 * b]
    }

    /// Transformer-branch embedding dims at levels 2..5.
    pub fn embed_dims(&self) -> [usize; 4] {
        let b = self.base_channels;
        [2 * b, 4 * b, 8 * b, 16 * b]
    }

    /// Attention heads at levels 2..5.
    pub const HEADS: [usize; 4] = [2, 2, 4, 4];
    /// Channel groups sharing one rational function in KAT blocks.
    pub const KAT_GROUPS: usize = 4;
    /// Hidden-width multiplier of the transformer MLP / GR-KAN layer.
    pub const MLP_RATIO: usize = 2;
}

// ---------------------------------------------------------------------------
// Encoder pieces

pub enum CnnLevel {
    Standard(ResidualBlockParams),
    Kan(KanConvBlockParams),
}

pub enum TrBlock {
    Vit(VitBlockParams),
    Kat(KatBlockParams),
}

pub struct TrLevel {
    /// Patch-embedding convolution, kernel 2 stride 2 (per-pixel tokens at
    /// the halved resolution).
    pub embed: ConvParams,
    pub block: TrBlock,
}

pub enum SkipFuse {
    /// Channel concatenation of the branch outputs (or the CNN branch alone).
    Concat,
    Sfe(SfeParams),
    Gaf(SfeGafParams),
}

// ---------------------------------------------------------------------------
// Decoder pieces

pub struct CnnDecoderStage {
    pub up: ConvParams,
    pub conv1: ConvParams,
    pub bn1_gamma: Tensor,
    pub bn1_beta: Tensor,
    pub bn1: BnState,
    pub conv2: ConvParams,
    pub bn2_gamma: Tensor,
    pub bn2_beta: Tensor,
    pub bn2: BnState,
}

impl CnnDecoderStage {
    pub fn new(rng: &mut Prng, c_in: usize, c_out: usize) -> CnnDecoderStage {
        CnnDecoderStage {
            up: ConvParams::transposed(rng, c_in, c_out, 2, 2, 0),
            conv1: ConvParams::new(rng, c_out, c_out, 3, 1, 1),
            bn1_gamma: const_param(&[c_out], 1.0),
            bn1_beta: zeros_param(&[c_out]),
            bn1: BnState::new(c_out),
            conv2: ConvParams::new(rng, c_out, c_out, 3, 1, 1),
            bn2_gamma: const_param(&[c_out], 1.0),
            bn2_beta: zeros_param(&[c_out]),
            bn2: BnState::new(c_out),
        }
    }
}

pub struct KanDecoderStage {
    pub up: ConvParams,
    pub kan1: KanLinearLayer,
    pub dw1: ConvParams,
    pub kan2: KanLinearLayer,
    pub dw2: ConvParams,
}

impl KanDecoderStage {
    pub fn new(rng: &mut Prng, c_in: usize, c_out: usize, grid: Rc<SplineGrid>) -> KanDecoderStage {
        KanDecoderStage {
            up: ConvParams::transposed(rng, c_in, c_out, 2, 2, 0),
            kan1: KanLinearLayer::new(c_out, c_out, grid.clone(), rng),
            dw1: ConvParams::depthwise(rng, c_out, 3, 1, 1),
            kan2: KanLinearLayer::new(c_out, c_out, grid, rng),
            dw2: ConvParams::depthwise(rng, c_out, 3, 1, 1),
        }
    }
}

pub enum DecoderStage {
    Cnn(CnnDecoderStage),
    Kan(KanDecoderStage),
}

/// Upsample-then-refine; the skip (when any) is concatenated by the caller
/// before this runs.
pub fn decoder_stage_forward(x: &Tensor, stage: &DecoderStage, train: bool) -> Tensor {
    match stage {
        DecoderStage::Cnn(s) => {
            let x = transposed_conv2d(x, &s.up);
            let x = relu(&batchnorm(&conv2d(&x, &s.conv1), &s.bn1_gamma, &s.bn1_beta, &s.bn1, train));
            relu(&batchnorm(&conv2d(&x, &s.conv2), &s.bn2_gamma, &s.bn2_beta, &s.bn2, train))
        }
        DecoderStage::Kan(s) => {
            let x = transposed_conv2d(x, &s.up);
            let x = depthwise_conv2d(&kan_channel_mix(&x, &s.kan1), &s.dw1);
            depthwise_conv2d(&kan_channel_mix(&x, &s.kan2), &s.dw2)
        }
    }
}

// ---------------------------------------------------------------------------
// Encoder output

pub struct EncoderState {
    /// CNN-branch features at levels 2..5, post-CCI when enabled.
    pub cnn_features: Vec<Tensor>,
    /// Transformer-branch features at levels 2..5 (empty without the branch).
    pub transformer_features: Vec<Tensor>,
    /// Skip outputs for the decoder: levels 1..4, shallow first.
    pub skips: Vec<Tensor>,
    /// Level-5 fused feature, consumed by the deepest decoder stage alone.
    pub bottleneck: Tensor,
}

// ---------------------------------------------------------------------------
// The network

pub struct DbKaUnet {
    pub config: NetworkConfig,
    pub stem: ConvParams,
    pub stem_bn_gamma: Tensor,
    pub stem_bn_beta: Tensor,
    pub stem_bn: BnState,
    /// Levels 2..5 of the CNN branch.
    pub cnn_levels: Vec<CnnLevel>,
    /// Levels 2..5 of the transformer branch, present iff use_transformer.
    pub tr_levels: Vec<TrLevel>,
    /// Per-level cross-branch interaction, present iff use_cci.
    pub cci: Vec<CciParams>,
    /// Skip fusion at levels 2..5 (index 3 produces the bottleneck).
    pub skip_fuse: Vec<SkipFuse>,
    pub decoder: Vec<DecoderStage>,
    pub final_conv: ConvParams,
}

impl DbKaUnet {
    pub fn new(config: NetworkConfig) -> DbKaUnet {
        let rng = &mut Prng::seed_from_u64(config.seed);
        let f = config.flags;
        let c = config.cnn_channels();
        let d = config.embed_dims();
        let grid = Rc::new(SplineGrid::default_kan());

        let stem = ConvParams::new(rng, 1, c[0], 7, 2, 3);

        let mut cnn_levels = Vec::new();
        let mut tr_levels = Vec::new();
        let mut cci = Vec::new();
        let mut skip_fuse = Vec::new();
        for lvl in 0..4 {
            // Levels 3 and 5 (lvl 1 and 3 here) hold the Kolmogorov-Arnold
            // modules when the hybrid encoder is on.
            let ka = f.use_hdbe && lvl % 2 == 1;
            cnn_levels.push(if ka {
                CnnLevel::Kan(KanConvBlockParams::new(rng, c[lvl], grid.clone()))
            } else {
                CnnLevel::Standard(ResidualBlockParams::new(rng, c[lvl], c[lvl + 1], 2))
            });
            if f.use_transformer {
                let d_in = if lvl == 0 { c[0] } else { d[lvl - 1] };
                let embed = ConvParams::new(rng, d_in, d[lvl], 2, 2, 0);
                let heads = NetworkConfig::HEADS[lvl];
                let hidden = NetworkConfig::MLP_RATIO * d[lvl];
                let block = if ka {
                    TrBlock::Kat(KatBlockParams::new(
                        rng,
                        d[lvl],
                        heads,
                        hidden,
                        NetworkConfig::KAT_GROUPS,
                    ))
                } else {
                    TrBlock::Vit(VitBlockParams::new(rng, d[lvl], heads, hidden))
                };
                tr_levels.push(TrLevel { embed, block });
                if f.use_cci {
                    cci.push(CciParams::new(rng, c[lvl + 1], d[lvl]));
                }
            }
            skip_fuse.push(if f.use_sfe && f.use_transformer {
                if f.use_gaf && ka {
                    SkipFuse::Gaf(SfeGafParams::new(rng, c[lvl + 1], d[lvl], c[lvl + 1]))
                } else {
                    SkipFuse::Sfe(SfeParams::new(rng, c[lvl + 1], d[lvl], c[lvl + 1]))
                }
            } else {
                SkipFuse::Concat
            });
        }

        // Channel count of each skip (level 1 first) and of the bottleneck.
        let mut skip_ch = vec![c[0]];
        for lvl in 0..4 {
            skip_ch.push(match &skip_fuse[lvl] {
                SkipFuse::Concat if f.use_transformer => c[lvl + 1] + d[lvl],
                _ => c[lvl + 1],
            });
        }

        // Interleaved decoder: CNN, KAN, CNN, KAN, CNN. KAN stages consume the
        // standard-module skips (levels 4 and 2); CNN stages consume the
        // Kolmogorov-Arnold skip (level 3) and the level-1 stem skip.
        let out_ch = [c[3], c[2], c[1], c[0], c[0]];
        let mut decoder = Vec::new();
        for (i, &c_out) in out_ch.iter().enumerate() {
            let c_in = if i == 0 { skip_ch[4] } else { out_ch[i - 1] + skip_ch[4 - i] };
            let kan_stage = f.use_kan_decoder && i % 2 == 1;
            decoder.push(if kan_stage {
                DecoderStage::Kan(KanDecoderStage::new(rng, c_in, c_out, grid.clone()))
            } else {
                DecoderStage::Cnn(CnnDecoderStage::new(rng, c_in, c_out))
            });
        }
        let final_conv = ConvParams::new(rng, c[0], 2, 1, 1, 0);

        DbKaUnet {
            config,
            stem,
            stem_bn_gamma: const_param(&[c[0]], 1.0),
            stem_bn_beta: zeros_param(&[c[0]]),
            stem_bn: BnState::new(c[0]),
            cnn_levels,
            tr_levels,
            cci,
            skip_fuse,
            decoder,
            final_conv,
        }
    }
}

fn map_to_tokens(x: &Tensor) -> Tensor {
    let (dch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    transpose2d(&reshape(x, &[dch, h * w]))
}

fn tokens_to_map(t: &Tensor, h: usize, w: usize) -> Tensor {
    reshape(&transpose2d(t), &[t.shape()[1], h, w])
}

/// Five-level hybrid dual-branch encoder.
pub fn hdbe_forward(image: &Tensor, model: &DbKaUnet, train: bool) -> EncoderState {
    assert_eq!(
        image.rank(),
        3,
        "hdbe_forward expects a [1,H,W] image, got {:?}",
        image.shape()
    );
    assert_eq!(image.shape()[0], 1, "hdbe_forward expects a single-channel image");
    let (h, w) = (image.shape()[1], image.shape()[2]);
    assert!(
        h % 32 == 0 && w % 32 == 0,
        "hdbe_forward: spatial dims {h}x{w} must be divisible by 32 (five halvings)"
    );
    let f = model.config.flags;

    let l1 = relu(&batchnorm(
        &conv2d(image, &model.stem),
        &model.stem_bn_gamma,
        &model.stem_bn_beta,
        &model.stem_bn,
        train,
    ));
    let mut skips = vec![l1.clone()];
    let mut cnn_features = Vec::new();
    let mut transformer_features = Vec::new();
    let mut bottleneck = None;
    let mut c_feat = l1.clone();
    let mut t_feat = l1;
    for lvl in 0..4 {
        let c_out = match &model.cnn_levels[lvl] {
            CnnLevel::Standard(p) => residual_block_forward(&c_feat, p, train),
            CnnLevel::Kan(p) => kanconv_block_forward(&c_feat, p, train),
        };
        let g_out = if f.use_transformer {
            let level = &model.tr_levels[lvl];
            let m = conv2d(&t_feat, &level.embed);
            let (gh, gw) = (m.shape()[1], m.shape()[2]);
            let tokens = map_to_tokens(&m);
            let tokens = match &level.block {
                TrBlock::Vit(p) => vit_block_forward(&tokens, p),
                TrBlock::Kat(p) => kat_block_forward(&tokens, p),
            };
            Some(tokens_to_map(&tokens, gh, gw))
        } else {
            None
        };
        let (l_f, g_f) = match (&g_out, f.use_cci) {
            (Some(g), true) => {
                let (lf, gf) = cci_forward(&c_out, g, &model.cci[lvl]);
                (lf, Some(gf))
            }
            (Some(g), false) => (c_out, Some(g.clone())),
            (None, _) => (c_out, None),
        };
        let skip = match (&model.skip_fuse[lvl], &g_f) {
            (SkipFuse::Sfe(p), Some(g)) => sfe_forward(&l_f, g, p),
            (SkipFuse::Gaf(p), Some(g)) => sfe_gaf_forward(&l_f, g, p),
            (SkipFuse::Concat, Some(g)) => concat0(&[&l_f, g]),
            (SkipFuse::Concat, None) => l_f.clone(),
            (_, None) => unreachable!("SFE fusion requires the transformer branch"),
        };
        if lvl < 3 {
            skips.push(skip);
        } else {
            bottleneck = Some(skip);
        }
        cnn_features.push(l_f.clone());
        c_feat = l_f;
        if let Some(g) = g_f {
            transformer_features.push(g.clone());
            t_feat = g;
        }
    }
    EncoderState {
        cnn_features,
        transformer_features,
        skips,
        bottleneck: bottleneck.expect("level 5 produces the bottleneck"),
    }
}

/// Interleaved decoder; the deepest stage consumes the bottleneck alone, the
/// remaining stages concatenate one skip each (deep to shallow) before
/// upsampling. Returns 2-class logits at full resolution.
pub fn decoder_forward(state: &EncoderState, model: &DbKaUnet, train: bool) -> Tensor {
    let mut x = state.bottleneck.clone();
    for (i, stage) in model.decoder.iter().enumerate() {
        if i > 0 {
            let skip = &state.skips[4 - i];
            assert_eq!(
                &x.shape()[1..],
                &skip.shape()[1..],
                "decoder stage {i}: spatial mismatch with skip"
            );
            x = concat0(&[&x, skip]);
        }
        x = decoder_stage_forward(&x, stage, train);
    }
    conv2d(&x, &model.final_conv)
}

/// Full forward pass: vessel-class probability map in [0,1], shape [1,H,W].
pub fn dbkaunet_forward(image: &Tensor, model: &DbKaUnet, train: bool) -> Tensor {
    let logits = decoder_forward(&hdbe_forward(image, model, train), model, train);
    let (h, w) = (logits.shape()[1], logits.shape()[2]);
    let prob = softmax_along(&reshape(&logits, &[2, h * w]), 0);
    reshape(&slice0(&prob, 1, 2), &[1, h, w])
}

// ---------------------------------------------------------------------------
// Parameter registry

fn push_conv(out: &mut Vec<(String, Tensor)>, name: &str, p: &ConvParams) {
    out.push((format!("{name}.weight"), p.weight.clone()));
    if let Some(b) = &p.bias {
        out.push((format!("{name}.bias"), b.clone()));
    }
}

fn push_lin(out: &mut Vec<(String, Tensor)>, name: &str, p: &LinearParams) {
    out.push((format!("{name}.w"), p.w.clone()));
    out.push((format!("{name}.b"), p.b.clone()));
}

fn push_kan_linear(out: &mut Vec<(String, Tensor)>, name: &str, p: &KanLinearLayer) {
    out.push((format!("{name}.beta"), p.beta.clone()));
    out.push((format!("{name}.s"), p.s.clone()));
    out.push((format!("{name}.c"), p.c.clone()));
}

fn push_rational(out: &mut Vec<(String, Tensor)>, name: &str, p: &crate::kan::RationalGroupParams) {
    out.push((format!("{name}.a"), p.a.clone()));
    out.push((format!("{name}.b"), p.b.clone()));
    out.push((format!("{name}.gamma"), p.gamma.clone()));
}

fn push_attn(out: &mut Vec<(String, Tensor)>, name: &str, p: &AttnParams) {
    out.push((format!("{name}.ln.gamma"), p.ln_gamma.clone()));
    out.push((format!("{name}.ln.beta"), p.ln_beta.clone()));
    push_lin(out, &format!("{name}.q"), &p.q);
    push_lin(out, &format!("{name}.k"), &p.k);
    push_lin(out, &format!("{name}.v"), &p.v);
    push_lin(out, &format!("{name}.o"), &p.o);
}

fn push_residual(out: &mut Vec<(String, Tensor)>, name: &str, p: &ResidualBlockParams) {
    push_conv(out, &format!("{name}.conv1"), &p.conv1);
    out.push((format!("{name}.bn1.gamma"), p.bn1_gamma.clone()));
    out.push((format!("{name}.bn1.beta"), p.bn1_beta.clone()));
    push_conv(out, &format!("{name}.conv2"), &p.conv2);
    out.push((format!("{name}.bn2.gamma"), p.bn2_gamma.clone()));
    out.push((format!("{name}.bn2.beta"), p.bn2_beta.clone()));
    if let Some(s) = &p.shortcut {
        push_conv(out, &format!("{name}.shortcut"), s);
    }
}

fn push_kanconv(out: &mut Vec<(String, Tensor)>, name: &str, p: &KanConvBlockParams) {
    push_kan_linear(out, &format!("{name}.phi1"), &p.phi1);
    push_conv(out, &format!("{name}.dw1"), &p.dw1);
    push_kan_linear(out, &format!("{name}.phi2"), &p.phi2);
    push_conv(out, &format!("{name}.dw2"), &p.dw2);
    out.push((format!("{name}.bn.gamma"), p.bn_gamma.clone()));
    out.push((format!("{name}.bn.beta"), p.bn_beta.clone()));
    push_conv(out, &format!("{name}.proj"), &p.proj);
}

fn push_sam(out: &mut Vec<(String, Tensor)>, name: &str, p: &crate::fusion::SamParams) {
    push_conv(out, &format!("{name}.main"), &p.main);
    push_conv(out, &format!("{name}.attn"), &p.attn);
}

fn push_pam(out: &mut Vec<(String, Tensor)>, name: &str, p: &crate::fusion::PamParams) {
    push_conv(out, &format!("{name}.q"), &p.q);
    push_conv(out, &format!("{name}.k"), &p.k);
    push_conv(out, &format!("{name}.v"), &p.v);
    out.push((format!("{name}.scale"), p.scale.clone()));
}

fn push_ldconv(out: &mut Vec<(String, Tensor)>, name: &str, p: &LdconvParams) {
    out.push((format!("{name}.weight"), p.weight.clone()));
    push_conv(out, &format!("{name}.offset"), &p.offset_conv);
}

impl DbKaUnet {
    /// Every learnable tensor with a stable hierarchical name. BatchNorm
    /// running statistics are not parameters; see [`DbKaUnet::named_bn_states`].
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        push_conv(&mut out, "stem.conv", &self.stem);
        out.push(("stem.bn.gamma".to_string(), self.stem_bn_gamma.clone()));
        out.push(("stem.bn.beta".to_string(), self.stem_bn_beta.clone()));
        for lvl in 0..4 {
            let level = lvl + 2;
            match &self.cnn_levels[lvl] {
                CnnLevel::Standard(p) => push_residual(&mut out, &format!("enc.l{level}.cnn"), p),
                CnnLevel::Kan(p) => push_kanconv(&mut out, &format!("enc.l{level}.cnn"), p),
            }
            if let Some(t) = self.tr_levels.get(lvl) {
                let name = format!("enc.l{level}.tr");
                push_conv(&mut out, &format!("{name}.embed"), &t.embed);
                match &t.block {
                    TrBlock::Vit(p) => {
                        push_attn(&mut out, &format!("{name}.attn"), &p.attn);
                        out.push((format!("{name}.ln2.gamma"), p.ln2_gamma.clone()));
                        out.push((format!("{name}.ln2.beta"), p.ln2_beta.clone()));
                        push_lin(&mut out, &format!("{name}.fc1"), &p.fc1);
                        push_lin(&mut out, &format!("{name}.fc2"), &p.fc2);
                    }
                    TrBlock::Kat(p) => {
                        push_attn(&mut out, &format!("{name}.attn"), &p.attn);
                        out.push((format!("{name}.ln2.gamma"), p.ln2_gamma.clone()));
                        out.push((format!("{name}.ln2.beta"), p.ln2_beta.clone()));
                        push_rational(&mut out, &format!("{name}.rat1"), &p.rat1);
                        push_lin(&mut out, &format!("{name}.fc1"), &p.fc1);
                        push_rational(&mut out, &format!("{name}.rat2"), &p.rat2);
                        push_lin(&mut out, &format!("{name}.fc2"), &p.fc2);
                    }
                }
            }
            if let Some(p) = self.cci.get(lvl) {
                push_sam(&mut out, &format!("enc.l{level}.cci.sam_l"), &p.sam_l);
                push_sam(&mut out, &format!("enc.l{level}.cci.sam_g"), &p.sam_g);
            }
            match &self.skip_fuse[lvl] {
                SkipFuse::Concat => {}
                SkipFuse::Sfe(p) => {
                    let name = format!("enc.l{level}.sfe");
                    push_pam(&mut out, &format!("{name}.pam_l"), &p.pam_l);
                    push_pam(&mut out, &format!("{name}.pam_g"), &p.pam_g);
                    push_conv(&mut out, &format!("{name}.conv_l"), &p.conv_l);
                    push_conv(&mut out, &format!("{name}.conv_g"), &p.conv_g);
                }
                SkipFuse::Gaf(p) => {
                    let name = format!("enc.l{level}.gaf");
                    push_pam(&mut out, &format!("{name}.pam_l"), &p.pam_l);
                    push_pam(&mut out, &format!("{name}.pam_g"), &p.pam_g);
                    push_ldconv(&mut out, &format!("{name}.ld_l"), &p.ld_l);
                    push_ldconv(&mut out, &format!("{name}.ld_g"), &p.ld_g);
                }
            }
        }
        for (i, stage) in self.decoder.iter().enumerate() {
            let name = format!("dec.s{}", i + 1);
            match stage {
                DecoderStage::Cnn(s) => {
                    push_conv(&mut out, &format!("{name}.up"), &s.up);
                    push_conv(&mut out, &format!("{name}.conv1"), &s.conv1);
                    out.push((format!("{name}.bn1.gamma"), s.bn1_gamma.clone()));
                    out.push((format!("{name}.bn1.beta"), s.bn1_beta.clone()));
                    push_conv(&mut out, &format!("{name}.conv2"), &s.conv2);
                    out.push((format!("{name}.bn2.gamma"), s.bn2_gamma.clone()));
                    out.push((format!("{name}.bn2.beta"), s.bn2_beta.clone()));
                }
                DecoderStage::Kan(s) => {
                    push_conv(&mut out, &format!("{name}.up"), &s.up);
                    push_kan_linear(&mut out, &format!("{name}.kan1"), &s.kan1);
                    push_conv(&mut out, &format!("{name}.dw1"), &s.dw1);
                    push_kan_linear(&mut out, &format!("{name}.kan2"), &s.kan2);
                    push_conv(&mut out, &format!("{name}.dw2"), &s.dw2);
                }
            }
        }
        push_conv(&mut out, "final", &self.final_conv);
        out
    }

    /// BatchNorm running statistics, named alongside their gamma/beta.
    pub fn named_bn_states(&self) -> Vec<(String, BnState)> {
        let mut out = vec![("stem.bn".to_string(), self.stem_bn.clone())];
        for lvl in 0..4 {
            let level = lvl + 2;
            match &self.cnn_levels[lvl] {
                CnnLevel::Standard(p) => {
                    out.push((format!("enc.l{level}.cnn.bn1"), p.bn1.clone()));
                    out.push((format!("enc.l{level}.cnn.bn2"), p.bn2.clone()));
                }
                CnnLevel::Kan(p) => out.push((format!("enc.l{level}.cnn.bn"), p.bn.clone())),
            }
        }
        for (i, stage) in self.decoder.iter().enumerate() {
            if let DecoderStage::Cnn(s) = stage {
                out.push((format!("dec.s{}.bn1", i + 1), s.bn1.clone()));
                out.push((format!("dec.s{}.bn2", i + 1), s.bn2.clone()));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

// ---------------------------------------------------------------------------
// Training step

/// One optimization step over a batch of (image, mask) pairs: mean composite
/// loss, backward, global-norm clip at 5.0, AdamW update. Panics with the
/// first non-finite layer if the loss diverges.
pub fn train_step(
    model: &DbKaUnet,
    batch: &[(Tensor, Tensor)],
    opt: &mut AdamW,
    alpha: f64,
) -> f64 {
    assert!(!batch.is_empty(), "train_step: empty batch");
    let params: Vec<Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();
    let mut total = 0.0;
    for (img, mask) in batch {
        let prob = dbkaunet_forward(img, model, true);
        let loss = scale(&composite_loss(&prob, mask, alpha), 1.0 / batch.len() as f64);
        let lv = loss.item();
        if !lv.is_finite() {
            panic!(
                "train_step: non-finite loss; first non-finite output from op '{}'",
                loss.first_non_finite().unwrap_or("loss")
            );
        }
        total += lv;
        loss.backward();
    }
    clip_global_norm(&params, 5.0);
    opt.update(&params);
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck_wrt_indices;
    use crate::tensor::NoGradGuard;
    use rand::{Rng, SeedableRng};
    use std::collections::HashSet;

    fn rand_image(rng: &mut Prng, h: usize, w: usize) -> Tensor {
        Tensor::new(&[1, h, w], (0..h * w).map(|_| rng.gen::<f64>()).collect())
    }

    fn rand_mask(rng: &mut Prng, h: usize, w: usize) -> Tensor {
        Tensor::new(
            &[1, h, w],
            (0..h * w).map(|_| if rng.gen::<f64>() < 0.2 { 1.0 } else { 0.0 }).collect(),
        )
    }

    #[test]
    fn encoder_shapes_on_64x64() {
        let model = DbKaUnet::new(NetworkConfig::new(4, 7, AblationFlags::preset('H')));
        let mut rng = Prng::seed_from_u64(1);
        let img = rand_image(&mut rng, 64, 64);
        let _guard = NoGradGuard::new();
        let state = hdbe_forward(&img, &model, true);
        let spatial: Vec<Vec<usize>> =
            state.skips.iter().map(|s| s.shape()[1..].to_vec()).collect();
        assert_eq!(spatial, vec![vec![32, 32], vec![16, 16], vec![8, 8], vec![4, 4]]);
        assert_eq!(state.bottleneck.shape(), &[64, 2, 2]);
        // SFE skips carry the CNN-branch channel counts
        let chans: Vec<usize> = state.skips.iter().map(|s| s.shape()[0]).collect();
        assert_eq!(chans, vec![4, 8, 16, 32]);
    }

    #[test]
    fn forward_is_full_resolution_softmax() {
        let model = DbKaUnet::new(NetworkConfig::new(4, 7, AblationFlags::preset('H')));
        let mut rng = Prng::seed_from_u64(2);
        let img = rand_image(&mut rng, 64, 64);
        let _guard = NoGradGuard::new();
        let state = hdbe_forward(&img, &model, false);
        let logits = decoder_forward(&state, &model, false);
        assert_eq!(logits.shape(), &[2, 64, 64]);
        let prob = dbkaunet_forward(&img, &model, false);
        assert_eq!(prob.shape(), &[1, 64, 64]);
        let ld = logits.to_vec();
        let pd = prob.to_vec();
        for (i, &p) in pd.iter().enumerate() {
            assert!((0.0..=1.0).contains(&p));
            // the two class probabilities sum to 1: recompute class 0
            let (a, b) = (ld[i], ld[4096 + i]);
            let m = a.max(b);
            let p0 = (a - m).exp() / ((a - m).exp() + (b - m).exp());
            assert!((p0 + p - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = DbKaUnet::new(NetworkConfig::new(4, 7, AblationFlags::preset('H')));
        let mut rng = Prng::seed_from_u64(3);
        let img = rand_image(&mut rng, 64, 64);
        let _guard = NoGradGuard::new();
        let a = dbkaunet_forward(&img, &model, false).to_vec();
        let b = dbkaunet_forward(&img, &model, false).to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn all_ablations_run_with_distinct_param_counts() {
        let mut rng = Prng::seed_from_u64(4);
        let img = rand_image(&mut rng, 64, 64);
        let mut counts = Vec::new();
        for letter in 'A'..='H' {
            let model =
                DbKaUnet::new(NetworkConfig::new(4, 7, AblationFlags::preset(letter)));
            let _guard = NoGradGuard::new();
            let prob = dbkaunet_forward(&img, &model, true);
            assert_eq!(prob.shape(), &[1, 64, 64], "preset {letter}");
            assert!(prob.to_vec().iter().all(|v| v.is_finite()), "preset {letter}");
            counts.push(model.param_count());
        }
        let distinct: HashSet<usize> = counts.iter().copied().collect();
        assert_eq!(distinct.len(), counts.len(), "param counts {counts:?} not distinct");
    }

    #[test]
    fn plain_concat_skips_stack_raw_branch_outputs() {
        // Preset D: dual branch + hybrid encoder, no CCI/SFE — skips must be
        // plain concatenations of the branch outputs.
        let model = DbKaUnet::new(NetworkConfig::new(4, 7, AblationFlags::preset('D')));
        let mut rng = Prng::seed_from_u64(5);
        let img = rand_image(&mut rng, 64, 64);
        let _guard = NoGradGuard::new();
        let state = hdbe_forward(&img, &model, true);
        let c = model.config.cnn_channels();
        let d = model.config.embed_dims();
        for lvl in 0..3 {
            let skip = &state.skips[lvl + 1];
            assert_eq!(skip.shape()[0], c[lvl + 1] + d[lvl]);
            let sd = skip.to_vec();
            let cd = state.cnn_features[lvl].to_vec();
            let gd = state.transformer_features[lvl].to_vec();
            assert_eq!(&sd[..cd.len()], &cd[..]);
            assert_eq!(&sd[cd.len()..], &gd[..]);
        }
        assert_eq!(state.bottleneck.shape()[0], c[4] + d[3]);
    }

    #[test]
    fn end_to_end_gradcheck_on_miniature_network() {
        let model = DbKaUnet::new(NetworkConfig::new(4, 11, AblationFlags::preset('H')));
        // Nudge deformable-offset biases off pixel centers so no finite
        // difference straddles a bilinear-interpolation kink.
        for (name, t) in model.named_params() {
            if name.contains(".offset.bias") {
                let v: Vec<f64> =
                    (0..t.numel()).map(|i| 0.17 + 0.11 * (i % 4) as f64).collect();
                t.set_data(&v);
            }
        }
        let mut rng = Prng::seed_from_u64(12);
        let img = rand_image(&mut rng, 64, 64);
        let mask = rand_mask(&mut rng, 64, 64);
        let params = model.named_params();
        let f = {
            let (img, mask) = (img.clone(), mask.clone());
            move || composite_loss(&dbkaunet_forward(&img, &model, true), &mask, 0.5)
        };
        // 20 randomly chosen scalar parameters spread across the model.
        // Each is checked at two step sizes and the better agreement kept:
        // ReLU-kink crossings bias large steps, floating-point cancellation
        // on near-zero attention gradients biases small steps, and a wrong
        // analytic gradient fails at both.
        let mut worst = (0.0_f64, String::new());
        for _ in 0..20 {
            let (name, t) = &params[rng.gen_range(0..params.len())];
            let idx = rng.gen_range(0..t.numel());
            let mut rel = gradcheck_wrt_indices(&f, t, &[idx], 1e-5);
            for eps in [1e-4, 1e-3] {
                if rel >= 1e-4 {
                    rel = rel.min(gradcheck_wrt_indices(&f, t, &[idx], eps));
                }
            }
            if rel > worst.0 {
                worst = (rel, format!("{name}[{idx}]"));
            }
        }
        assert!(worst.0 < 1e-4, "worst rel error {} at {}", worst.0, worst.1);
    }

    #[test]
    fn train_step_updates_parameters_and_reports_finite_loss() {
        let model = DbKaUnet::new(NetworkConfig::new(4, 7, AblationFlags::preset('H')));
        let mut rng = Prng::seed_from_u64(6);
        let batch = vec![(rand_image(&mut rng, 64, 64), rand_mask(&mut rng, 64, 64))];
        let mut opt = AdamW::new(5e-4, 1e-5, 100);
        let before = model.stem.weight.to_vec();
        let loss = train_step(&model, &batch, &mut opt, 0.5);
        assert!(loss.is_finite() && loss > 0.0);
        assert_ne!(model.stem.weight.to_vec(), before);
        // gradients are consumed by the update
        assert!(model.stem.weight.grad().is_none());
    }

    #[test]
    fn param_names_are_unique() {
        let model = DbKaUnet::new(NetworkConfig::new(4, 7, AblationFlags::preset('H')));
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let set: HashSet<&String> = names.iter().collect();
        assert_eq!(set.len(), names.len());
    }

    #[test]
    #[should_panic(expected = "divisible by 32")]
    fn rejects_indivisible_input() {
        let model = DbKaUnet::new(NetworkConfig::new(4, 7, AblationFlags::none()));
        let img = Tensor::zeros(&[1, 48, 48]);
        hdbe_forward(&img, &model, false);
    }

    #[test]
    #[should_panic(expected = "require use_transformer")]
    fn rejects_cci_without_transformer() {
        let mut f = AblationFlags::none();
        f.use_cci = true;
        NetworkConfig::new(4, 7, f);
    }
}

