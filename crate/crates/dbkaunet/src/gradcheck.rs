//! Central-finite-difference gradient verification.
//!
//! Every primitive and composite block in this crate is validated against
//! this harness at 64-bit precision. The comparison is
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`, maximized over
//! the elements of the checked tensor.

use crate::tensor::Tensor;

/// Checks the gradient of a scalar-valued function with respect to `x`,
/// where `x` is a leaf tensor the closure reads (an input or a parameter
/// owned by a model the closure captures). `x` is perturbed in place and
/// restored before returning.
pub fn gradcheck_wrt(f: impl Fn() -> Tensor, x: &Tensor, eps: f64) -> f64 {
    let all: Vec<usize> = (0..x.numel()).collect();
    gradcheck_wrt_indices(f, x, &all, eps)
}

/// Like [`gradcheck_wrt`] but perturbs only the listed elements of `x`.
/// Used for end-to-end checks where perturbing every element of every
/// parameter tensor would be prohibitively slow.
pub fn gradcheck_wrt_indices(f: impl Fn() -> Tensor, x: &Tensor, indices: &[usize], eps: f64) -> f64 {
    assert!(
        (1e-6..=1e-3).contains(&eps),
        "gradcheck eps {eps} outside [1e-6, 1e-3]"
    );
    let original = x.to_vec();
    assert!(original.iter().all(|v| v.is_finite()), "gradcheck input not finite");

    x.zero_grad();
    let y = f();
    assert_eq!(y.numel(), 1, "gradcheck target must be scalar-valued");
    if !y.item().is_finite() {
        panic!(
            "gradcheck: non-finite value in op '{}'",
            y.first_non_finite().unwrap_or("output")
        );
    }
    y.backward();
    let analytic = x
        .grad()
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    x.zero_grad();

    let mut max_rel = 0.0_f64;
    let mut data = original.clone();
    for &i in indices {
        let saved = data[i];
        data[i] = saved + eps;
        x.set_data(&data);
        let yp = f().item();
        data[i] = saved - eps;
        x.set_data(&data);
        let ym = f().item();
        data[i] = saved;
        x.set_data(&data);
        if !yp.is_finite() || !ym.is_finite() {
            panic!("gradcheck: non-finite value during perturbation of element {i}");
        }
        let numeric = (yp - ym) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    x.set_data(&original);
    max_rel
}

/// Convenience form for functions of one explicit tensor argument.
pub fn gradcheck(f: impl Fn(&Tensor) -> Tensor, x: &Tensor, eps: f64) -> f64 {
    let xc = x.clone();
    gradcheck_wrt(move || f(&xc), x, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let x = Tensor::param(&[1], vec![3.0]);
        let err = gradcheck(|x| ops::sum_all(&ops::mul(x, x)), &x, 1e-4);
        // analytic 6, central difference of a quadratic is exact up to rounding
        assert!(err < 1e-8, "rel error {err}");
    }

    #[test]
    fn two_layer_composite() {
        let x = Tensor::param(&[4], vec![0.3, -0.7, 1.1, 0.2]);
        let w1 = Tensor::param(&[3, 4], (0..12).map(|i| 0.1 * i as f64 - 0.5).collect());
        let w2 = Tensor::param(&[1, 3], vec![0.4, -0.3, 0.2]);
        let f = {
            let (w1, w2) = (w1.clone(), w2.clone());
            move |x: &Tensor| {
                let h = ops::silu(&ops::matmul(&w1, &ops::reshape(x, &[4, 1])));
                ops::sum_all(&ops::matmul(&w2, &h))
            }
        };
        assert!(gradcheck(&f, &x, 1e-4) < 1e-5);
        let xc = x.clone();
        assert!(gradcheck_wrt(move || f(&xc), &w1, 1e-4) < 1e-5);
    }
}

// ---------------------------------------------------------------------------
// Full-suite registry

/// One entry of the full verification suite: an operation name and the
/// measured worst relative gradient error across all of its checked inputs
/// and parameters.
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// Pass threshold for every suite entry.
pub const OP_TOLERANCE: f64 = 1e-4;

/// Runs central-difference verification over every differentiable operation
/// and composite block in the crate, each exactly once, ending with a
/// miniature end-to-end network. Each check starts at step size 1e-5; if the
/// relative error is above tolerance it is retried at 1e-4 and 1e-3 and the
/// best agreement kept — kink crossings bias large steps, floating-point
/// cancellation on near-zero gradients biases small steps, and a wrong
/// analytic gradient fails at every step size.
pub fn full_report() -> Vec<OpCheck> {
    use crate::conv::{
        bilinear_sample, conv2d, depthwise_conv2d, ldconv_forward, transposed_conv2d, ConvParams,
        LdconvParams,
    };
    use crate::fusion::{
        cci_forward, pam_forward, sam_forward, sfe_forward, sfe_gaf_forward, CciParams, PamParams,
        SamParams, SfeGafParams, SfeParams,
    };
    use crate::init::Prng;
    use crate::kan::{
        grkan_forward, kan_channel_mix, kan_linear_forward, kanconv_block_forward,
        KanConvBlockParams, KanLinearLayer, RationalGroupParams, SplineGrid,
    };
    use crate::network::{
        composite_loss, dbkaunet_forward, kat_block_forward, mhsa, residual_block_forward,
        vit_block_forward, AblationFlags, AttnParams, DbKaUnet, KatBlockParams, NetworkConfig,
        ResidualBlockParams, VitBlockParams,
    };
    use crate::ops::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use std::rc::Rc;

    // A parameter with uniform values in [lo, hi].
    fn randp(rng: &mut Prng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::param(shape, (0..n).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect())
    }

    // Values bounded away from zero (for |.| and ReLU kinks).
    fn randp_off_zero(rng: &mut Prng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|_| (0.2 + 0.8 * rng.gen::<f64>()) * if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        Tensor::param(shape, v)
    }

    // Asymmetric fixed weights so permuted or dropped elements are caught.
    fn weights_like(t: &Tensor, seed: u64) -> Tensor {
        let mut rng = Prng::seed_from_u64(seed);
        Tensor::new(t.shape(), (0..t.numel()).map(|_| 0.3 + rng.gen::<f64>()).collect())
    }

    fn robust(f: &dyn Fn() -> Tensor, x: &Tensor) -> f64 {
        let mut err = gradcheck_wrt(f, x, 1e-5);
        for eps in [1e-4, 1e-3] {
            if err >= OP_TOLERANCE {
                err = err.min(gradcheck_wrt(f, x, eps));
            }
        }
        err
    }

    fn check(name: &'static str, f: &dyn Fn() -> Tensor, wrt: &[&Tensor]) -> OpCheck {
        let max_rel_err = wrt.iter().map(|x| robust(f, x)).fold(0.0, f64::max);
        OpCheck { name, max_rel_err }
    }

    // Reduce a non-scalar output with fixed asymmetric weights.
    fn wsum(y: &Tensor, seed: u64) -> Tensor {
        sum_all(&mul(y, &weights_like(y, seed)))
    }

    let mut rng = Prng::seed_from_u64(20_260_823);
    let mut out = Vec::new();

    // -- elementwise ---------------------------------------------------------
    let x = randp(&mut rng, &[3, 4], -1.2, 1.2);
    let y = randp(&mut rng, &[3, 4], 0.5, 1.5);
    out.push(check("add", &|| wsum(&add(&x, &y), 1), &[&x, &y]));
    out.push(check("sub", &|| wsum(&sub(&x, &y), 2), &[&x, &y]));
    out.push(check("mul", &|| wsum(&mul(&x, &y), 3), &[&x, &y]));
    out.push(check("div", &|| wsum(&div(&x, &y), 4), &[&x, &y]));
    out.push(check("neg", &|| wsum(&neg(&x), 5), &[&x]));
    out.push(check("exp", &|| wsum(&exp(&x), 6), &[&x]));
    out.push(check("sigmoid", &|| wsum(&sigmoid(&x), 7), &[&x]));
    out.push(check("silu", &|| wsum(&silu(&x), 8), &[&x]));
    out.push(check("gelu", &|| wsum(&gelu(&x), 9), &[&x]));
    out.push(check("scale", &|| wsum(&scale(&x, 0.7), 10), &[&x]));
    out.push(check("add_scalar", &|| wsum(&add_scalar(&x, 0.3), 11), &[&x]));
    out.push(check("sum_all", &|| sum_all(&x), &[&x]));
    out.push(check("mean_all", &|| mean_all(&x), &[&x]));
    out.push(check("ln_clamped", &|| wsum(&ln_clamped(&y, 1e-7), 12), &[&y]));
    let xk = randp_off_zero(&mut rng, &[3, 4]);
    out.push(check("relu", &|| wsum(&relu(&xk), 13), &[&xk]));
    out.push(check("abs", &|| wsum(&abs(&xk), 14), &[&xk]));

    // -- linear algebra ------------------------------------------------------
    let a = randp(&mut rng, &[3, 4], -1.0, 1.0);
    let b = randp(&mut rng, &[4, 2], -1.0, 1.0);
    out.push(check("matmul", &|| wsum(&matmul(&a, &b), 15), &[&a, &b]));
    out.push(check("transpose2d", &|| wsum(&transpose2d(&a), 16), &[&a]));
    out.push(check("softmax_along", &|| wsum(&softmax_along(&a, 1), 17), &[&a]));

    // -- normalization -------------------------------------------------------
    let xb = randp(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let gamma = randp(&mut rng, &[2], 0.5, 1.5);
    let beta = randp(&mut rng, &[2], -0.3, 0.3);
    let bn = BnState::new(2);
    out.push(check(
        "batchnorm",
        &|| wsum(&batchnorm(&xb, &gamma, &beta, &bn, true), 18),
        &[&xb, &gamma, &beta],
    ));
    let tok = randp(&mut rng, &[5, 4], -1.0, 1.0);
    let lg = randp(&mut rng, &[4], 0.5, 1.5);
    let lb = randp(&mut rng, &[4], -0.3, 0.3);
    out.push(check(
        "layernorm",
        &|| wsum(&layernorm(&tok, &lg, &lb, 1e-6), 19),
        &[&tok, &lg, &lb],
    ));

    // -- pooling / channel maps ----------------------------------------------
    out.push(check("adaptive_avg_pool_to_1", &|| wsum(&adaptive_avg_pool_to_1(&xb), 20), &[&xb]));
    out.push(check("avg_pool2x2", &|| wsum(&avg_pool2x2(&xb), 21), &[&xb]));
    out.push(check("upsample_nearest2", &|| wsum(&upsample_nearest2(&xb), 22), &[&xb]));
    let cv = randp(&mut rng, &[2], 0.5, 1.5);
    out.push(check("scale_channels", &|| wsum(&scale_channels(&xb, &cv), 23), &[&xb, &cv]));
    out.push(check("add_channels", &|| wsum(&add_channels(&xb, &cv), 24), &[&xb, &cv]));

    // -- shape ---------------------------------------------------------------
    out.push(check("reshape", &|| wsum(&reshape(&a, &[2, 6]), 25), &[&a]));
    out.push(check("concat0", &|| wsum(&concat0(&[&x, &y]), 26), &[&x, &y]));
    out.push(check("slice0", &|| wsum(&slice0(&a, 1, 3), 27), &[&a]));
    out.push(check("slice_cols", &|| wsum(&slice_cols(&a, 1, 3), 28), &[&a]));
    let b2 = randp(&mut rng, &[3, 2], -1.0, 1.0);
    out.push(check("concat_cols", &|| wsum(&concat_cols(&[&a, &b2]), 29), &[&a, &b2]));
    let idx = Rc::new(vec![0usize, 2, 2, 5, 7, 1]);
    out.push(check(
        "gather_fixed",
        &|| wsum(&gather_fixed(&a, idx.clone(), &[6]), 30),
        &[&a],
    ));

    // -- convolutions --------------------------------------------------------
    let xi = randp(&mut rng, &[2, 5, 5], -1.0, 1.0);
    let pc = ConvParams::new(&mut rng, 2, 3, 3, 1, 1);
    out.push(check(
        "conv2d",
        &|| wsum(&conv2d(&xi, &pc), 31),
        &[&xi, &pc.weight, pc.bias.as_ref().unwrap()],
    ));
    let pdw = ConvParams::depthwise(&mut rng, 2, 3, 1, 1);
    out.push(check(
        "depthwise_conv2d",
        &|| wsum(&depthwise_conv2d(&xi, &pdw), 32),
        &[&xi, &pdw.weight],
    ));
    let xt = randp(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let ptr = ConvParams::transposed(&mut rng, 2, 3, 2, 2, 0);
    out.push(check(
        "transposed_conv2d",
        &|| wsum(&transposed_conv2d(&xt, &ptr), 33),
        &[&xt, &ptr.weight],
    ));
    // fractional coordinates keep finite differences off interpolation kinks
    let coords = Tensor::param(&[5, 2], (0..10).map(|i| 0.37 + 0.61 * (i % 5) as f64).collect());
    out.push(check(
        "bilinear_sample",
        &|| wsum(&bilinear_sample(&xt, &coords), 34),
        &[&xt, &coords],
    ));
    let pld = LdconvParams::new(&mut rng, 1, 2);
    {
        // nudge the predicted offsets off pixel centers, as above
        let ob = pld.offset_conv.bias.as_ref().unwrap();
        let v: Vec<f64> = (0..ob.numel()).map(|i| 0.17 + 0.11 * (i % 4) as f64).collect();
        ob.set_data(&v);
    }
    let xl = randp(&mut rng, &[1, 6, 6], -1.0, 1.0);
    out.push(check(
        "ldconv_forward",
        &|| wsum(&ldconv_forward(&xl, &pld), 35),
        &[&xl, &pld.weight, &pld.offset_conv.weight, pld.offset_conv.bias.as_ref().unwrap()],
    ));

    // -- KAN -----------------------------------------------------------------
    let grid = Rc::new(SplineGrid::default_kan());
    let kl = KanLinearLayer::new(3, 2, grid.clone(), &mut rng);
    let xkan = randp(&mut rng, &[4, 3], -1.5, 1.5);
    out.push(check(
        "kan_linear_forward",
        &|| wsum(&kan_linear_forward(&xkan, &kl), 36),
        &[&xkan, &kl.beta, &kl.s, &kl.c],
    ));
    let klc = KanLinearLayer::new(2, 3, grid.clone(), &mut rng);
    let xmix = randp(&mut rng, &[2, 3, 3], -1.5, 1.5);
    out.push(check(
        "kan_channel_mix",
        &|| wsum(&kan_channel_mix(&xmix, &klc), 37),
        &[&xmix, &klc.c],
    ));
    let kcb = KanConvBlockParams::new(&mut rng, 2, grid.clone());
    let xkc = randp(&mut rng, &[2, 4, 4], -1.5, 1.5);
    out.push(check(
        "kanconv_block_forward",
        &|| wsum(&kanconv_block_forward(&xkc, &kcb, true), 38),
        &[&xkc, &kcb.phi1.c, &kcb.dw1.weight, &kcb.phi2.c, &kcb.dw2.weight, &kcb.bn_gamma, &kcb.proj.weight],
    ));
    let rat = RationalGroupParams::silu_init(4);
    let xr = randp(&mut rng, &[5, 8], -1.5, 1.5);
    out.push(check(
        "grkan_forward",
        &|| wsum(&grkan_forward(&xr, &rat), 39),
        &[&xr, &rat.a, &rat.b, &rat.gamma],
    ));

    // -- fusion attention ----------------------------------------------------
    let xf = randp(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let sam = SamParams::new(&mut rng, 2);
    out.push(check(
        "sam_forward",
        &|| wsum(&sam_forward(&xf, &sam), 40),
        &[&xf, &sam.main.weight, &sam.attn.weight],
    ));
    let pam = PamParams::new(&mut rng, 2);
    pam.scale.set_data(&[0.5]); // zero init would hide the q/k/v paths
    out.push(check(
        "pam_forward",
        &|| wsum(&pam_forward(&xf, &pam), 41),
        &[&xf, &pam.q.weight, &pam.k.weight, &pam.v.weight, &pam.scale],
    ));
    let cci = CciParams::new(&mut rng, 2, 3);
    let xg = randp(&mut rng, &[3, 4, 4], -1.0, 1.0);
    out.push(check(
        "cci_forward",
        &|| {
            let (l2, g2) = cci_forward(&xf, &xg, &cci);
            add(&wsum(&l2, 42), &wsum(&g2, 43))
        },
        &[&xf, &xg, &cci.sam_l.main.weight, &cci.sam_g.attn.weight],
    ));
    let sfe = SfeParams::new(&mut rng, 2, 3, 2);
    for p in [&sfe.pam_l, &sfe.pam_g] {
        p.scale.set_data(&[0.5]);
    }
    out.push(check(
        "sfe_forward",
        &|| wsum(&sfe_forward(&xf, &xg, &sfe), 44),
        &[&xf, &xg, &sfe.conv_l.weight, &sfe.conv_g.weight, &sfe.pam_l.v.weight],
    ));
    let gaf = SfeGafParams::new(&mut rng, 2, 3, 2);
    for p in [&gaf.pam_l, &gaf.pam_g] {
        p.scale.set_data(&[0.5]);
    }
    for ld in [&gaf.ld_l, &gaf.ld_g] {
        let ob = ld.offset_conv.bias.as_ref().unwrap();
        let v: Vec<f64> = (0..ob.numel()).map(|i| 0.17 + 0.11 * (i % 4) as f64).collect();
        ob.set_data(&v);
    }
    out.push(check(
        "sfe_gaf_forward",
        &|| wsum(&sfe_gaf_forward(&xf, &xg, &gaf), 45),
        &[&xf, &xg, &gaf.ld_l.weight, &gaf.ld_g.offset_conv.weight, &gaf.pam_g.v.weight],
    ));

    // -- transformer / CNN blocks --------------------------------------------
    let rb = ResidualBlockParams::new(&mut rng, 2, 4, 2);
    out.push(check(
        "residual_block_forward",
        &|| wsum(&residual_block_forward(&xf, &rb, true), 46),
        &[&xf, &rb.conv1.weight, &rb.conv2.weight, &rb.shortcut.as_ref().unwrap().weight],
    ));
    let att = AttnParams::new(&mut rng, 8, 2);
    let toks = randp(&mut rng, &[4, 8], -1.0, 1.0);
    out.push(check(
        "mhsa",
        &|| wsum(&mhsa(&toks, &att), 47),
        &[&toks, &att.q.w, &att.k.w, &att.v.w, &att.o.w, &att.ln_gamma],
    ));
    let vit = VitBlockParams::new(&mut rng, 8, 2, 16);
    out.push(check(
        "vit_block_forward",
        &|| wsum(&vit_block_forward(&toks, &vit), 48),
        &[&toks, &vit.attn.q.w, &vit.fc1.w, &vit.fc2.b],
    ));
    let kat = KatBlockParams::new(&mut rng, 8, 2, 16, 4);
    out.push(check(
        "kat_block_forward",
        &|| wsum(&kat_block_forward(&toks, &kat), 49),
        &[&toks, &kat.attn.v.w, &kat.fc1.w, &kat.rat1.a, &kat.rat2.b],
    ));

    // -- decoder stages --------------------------------------------------------
    use crate::network::model::{decoder_stage_forward, CnnDecoderStage, DecoderStage, KanDecoderStage};
    let dec_in = randp(&mut rng, &[4, 2, 2], -1.0, 1.0);
    let dc = DecoderStage::Cnn(CnnDecoderStage::new(&mut rng, 4, 2));
    {
        let (c1, up) = match &dc {
            DecoderStage::Cnn(s) => (&s.conv1, &s.up),
            DecoderStage::Kan(_) => unreachable!(),
        };
        out.push(check(
            "decoder_stage (cnn)",
            &|| wsum(&decoder_stage_forward(&dec_in, &dc, true), 50),
            &[&dec_in, &up.weight, &c1.weight],
        ));
    }
    let dk = DecoderStage::Kan(KanDecoderStage::new(&mut rng, 4, 2, grid.clone()));
    {
        let (k1, dw2) = match &dk {
            DecoderStage::Kan(s) => (&s.kan1, &s.dw2),
            DecoderStage::Cnn(_) => unreachable!(),
        };
        out.push(check(
            "decoder_stage (kan)",
            &|| wsum(&decoder_stage_forward(&dec_in, &dk, true), 51),
            &[&dec_in, &k1.c, &dw2.weight],
        ));
    }

    // -- loss ----------------------------------------------------------------
    let prob = randp(&mut rng, &[1, 3, 3], 0.2, 0.8);
    let target =
        Tensor::new(&[1, 3, 3], (0..9).map(|i| ((i * 5) % 3 == 0) as u8 as f64).collect());
    out.push(check(
        "composite_loss",
        &|| composite_loss(&prob, &target, 0.5),
        &[&prob],
    ));

    // -- miniature end-to-end network -----------------------------------------
    let model = DbKaUnet::new(NetworkConfig::new(4, 11, AblationFlags::preset('H')));
    for (name, t) in model.named_params() {
        if name.contains(".offset.bias") {
            let v: Vec<f64> = (0..t.numel()).map(|i| 0.17 + 0.11 * (i % 4) as f64).collect();
            t.set_data(&v);
        }
    }
    let mut drng = Prng::seed_from_u64(12);
    let img = Tensor::new(&[1, 64, 64], (0..64 * 64).map(|_| drng.gen::<f64>()).collect());
    let mask = Tensor::new(
        &[1, 64, 64],
        (0..64 * 64).map(|_| if drng.gen::<f64>() < 0.2 { 1.0 } else { 0.0 }).collect(),
    );
    let params = model.named_params();
    let f = || composite_loss(&dbkaunet_forward(&img, &model, true), &mask, 0.5);
    let mut worst = 0.0_f64;
    for _ in 0..8 {
        let (_, t) = &params[drng.gen_range(0..params.len())];
        let i = drng.gen_range(0..t.numel());
        let mut rel = gradcheck_wrt_indices(&f, t, &[i], 1e-5);
        for eps in [1e-4, 1e-3] {
            if rel >= OP_TOLERANCE {
                rel = rel.min(gradcheck_wrt_indices(&f, t, &[i], eps));
            }
        }
        worst = worst.max(rel);
    }
    out.push(OpCheck { name: "dbkaunet_forward (end-to-end)", max_rel_err: worst });

    out
}
