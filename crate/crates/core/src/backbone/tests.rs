use super::*;

fn linear_only(input: usize, hidden: Vec<usize>, classes: usize) -> BackboneConfig {
    BackboneConfig {
        input_shape: vec![input],
        conv: vec![],
        hidden,
        classes_per_head: classes,
        scenario: Scenario::DomainIncremental,
        num_tasks: 1,
    }
}

fn small_cnn(scenario: Scenario) -> BackboneConfig {
    BackboneConfig {
        input_shape: vec![2, 5, 5],
        conv: vec![
            ConvSpec { out_channels: 3, kernel: 3, stride: 1 },
            ConvSpec { out_channels: 4, kernel: 3, stride: 2 },
        ],
        hidden: vec![6],
        classes_per_head: 3,
        scenario,
        num_tasks: 2,
    }
}

fn ones(model: &Backbone<impl Scalar>) -> Vec<Mask> {
    model.mask_shapes().iter().map(|s| Mask::ones(s)).collect()
}

fn random_input<F: Scalar>(shape: Vec<usize>, seed: u64) -> Tensor<F> {
    let n = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(shape, gaussian(&mut rng, n, 1.0)).unwrap()
}

#[test]
fn hadamard_two_by_two() {
    let mut model = Backbone::<f64>::new(linear_only(2, vec![2], 0), 0).unwrap();
    *model.maskable_weight_mut(0) = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mask = Mask::from_vec(vec![2, 2], vec![1, 0, 0, 1]).unwrap();
    let x = Tensor::from_vec(vec![1, 2], vec![1.0, 1.0]).unwrap();
    let out = model.forward_masked(&x, &[mask], 0).unwrap();
    assert_eq!(out.data(), &[1.0, 4.0]);
}

#[test]
fn identity_mask_matches_direct_evaluation() {
    let model = Backbone::<f64>::new(linear_only(4, vec![3], 2), 11).unwrap();
    let x = random_input::<f64>(vec![5, 4], 1);
    let out = model.forward_masked(&x, &ones(&model), 0).unwrap();

    // direct evaluation with the raw weights
    let w = model.maskable_weight(0).data();
    let head = &model.heads()[0];
    for n in 0..5 {
        let row = &x.data()[n * 4..(n + 1) * 4];
        let hidden: Vec<f64> = (0..3)
            .map(|o| (0..4).map(|i| w[o * 4 + i] * row[i]).sum::<f64>().max(0.0))
            .collect();
        for k in 0..2 {
            let logit: f64 = (0..3).map(|o| head.weight.data()[k * 3 + o] * hidden[o]).sum::<f64>() + head.bias[k];
            assert_eq!(out.data()[n * 2 + k], logit);
        }
    }
}

#[test]
fn zero_masks_annihilate_linear_model() {
    let model = Backbone::<f32>::new(linear_only(3, vec![4, 2], 0), 5).unwrap();
    let masks: Vec<Mask> = model.mask_shapes().iter().map(|s| Mask::full(s, 0)).collect();
    let x = random_input::<f32>(vec![3, 3], 2);
    let out = model.forward_masked(&x, &masks, 0).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn mask_shape_mismatch_names_layer() {
    let model = Backbone::<f32>::new(small_cnn(Scenario::DomainIncremental), 0).unwrap();
    let mut masks = ones(&model);
    masks[1] = Mask::ones(&[4, 3, 3, 2]);
    let x = random_input::<f32>(vec![1, 2, 5, 5], 0);
    let err = model.forward_masked(&x, &masks, 0).unwrap_err();
    assert!(err.to_string().contains("maskable layer 1"), "{err}");
    assert!(model.forward_masked(&x, &masks[..2], 0).is_err());
}

#[test]
fn forward_is_pure() {
    let model = Backbone::<f32>::new(small_cnn(Scenario::TaskIncremental), 3).unwrap();
    let snapshot = model.clone();
    let x = random_input::<f32>(vec![4, 2, 5, 5], 9);
    let a = model.forward_masked(&x, &ones(&model), 1).unwrap();
    let _ = model.forward_train(&x, &ones(&model), 0, NormMode::Batch).unwrap();
    let b = model.forward_masked(&x, &ones(&model), 1).unwrap();
    assert!(a.bit_eq(&b));
    for l in 0..model.num_maskable() {
        assert!(model.maskable_weight(l).bit_eq(snapshot.maskable_weight(l)));
    }
    for (n, s) in model.norms().iter().zip(snapshot.norms()) {
        assert!(n.bit_eq(s));
    }
}

#[test]
fn tap_zero_input_is_zero() {
    let model = Backbone::<f32>::new(small_cnn(Scenario::DomainIncremental), 1).unwrap();
    let x = Tensor::zeros(&[2, 2, 5, 5]);
    let a = model.tap_first_layer(&x, &ones(&model)[0]).unwrap();
    assert_eq!(a.shape(), &[2, 3, 5, 5]);
    assert!(a.data().iter().all(|&v| v == 0.0));
}

#[test]
fn tap_identity_one_by_one() {
    let cfg = BackboneConfig {
        input_shape: vec![2, 3, 3],
        conv: vec![ConvSpec { out_channels: 2, kernel: 1, stride: 1 }],
        hidden: vec![],
        classes_per_head: 2,
        scenario: Scenario::DomainIncremental,
        num_tasks: 1,
    };
    let mut model = Backbone::<f64>::new(cfg, 0).unwrap();
    *model.maskable_weight_mut(0) = Tensor::from_vec(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let x = random_input::<f64>(vec![3, 2, 3, 3], 4);
    let a = model.tap_first_layer(&x, &Mask::ones(&[2, 2, 1, 1])).unwrap();
    assert_eq!(a.data(), x.data());
}

/// Independent nested-loop convolution with explicit padding.
fn naive_conv(x: &[f64], n: usize, c: usize, h: usize, w: usize, wt: &[f64], o: usize, k: usize, stride: usize) -> Vec<f64> {
    let pad = k / 2;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0; n * c * ph * pw];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    padded[((b * c + ch) * ph + y + pad) * pw + xx + pad] = x[((b * c + ch) * h + y) * w + xx];
                }
            }
        }
    }
    let oh = (ph - k) / stride + 1;
    let ow = (pw - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for ch in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                s += wt[((oc * c + ch) * k + ky) * k + kx]
                                    * padded[((b * c + ch) * ph + y * stride + ky) * pw + xx * stride + kx];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    out
}

#[test]
fn tap_matches_naive_convolution() {
    for stride in [1, 2] {
        let mut cfg = small_cnn(Scenario::DomainIncremental);
        cfg.conv[0].stride = stride;
        let model = Backbone::<f64>::new(cfg, 21).unwrap();
        let x = random_input::<f64>(vec![3, 2, 5, 5], 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask_data: Vec<u8> = (0..54).map(|_| rand::Rng::random_range(&mut rng, 0..2u8)).collect();
        let mask = Mask::from_vec(vec![3, 2, 3, 3], mask_data).unwrap();
        let got = model.tap_first_layer(&x, &mask).unwrap();
        let wt: Vec<f64> = model
            .maskable_weight(0)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(w, &m)| w * m as f64)
            .collect();
        let want = naive_conv(x.data(), 3, 2, 5, 5, &wt, 3, 3, stride);
        assert_eq!(got.len(), want.len());
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn tap_counts_only_first_layer() {
    let model = Backbone::<f32>::new(small_cnn(Scenario::DomainIncremental), 1).unwrap();
    let x = random_input::<f32>(vec![2, 2, 5, 5], 0);
    model.tap_first_layer(&x, &ones(&model)[0]).unwrap();
    assert_eq!(model.layer_calls(), vec![1, 0, 0, 0]);
    model.forward_masked(&x, &ones(&model), 0).unwrap();
    assert_eq!(model.layer_calls(), vec![2, 1, 1, 1]);
}

#[test]
fn tap_requires_convolution() {
    let model = Backbone::<f32>::new(linear_only(3, vec![2], 2), 0).unwrap();
    let x = Tensor::zeros(&[1, 3]);
    assert!(matches!(model.tap_first_layer(&x, &Mask::ones(&[2, 3])), Err(Error::NoConvolution)));
}

#[test]
fn head_layout_follows_scenario() {
    let t = Backbone::<f32>::new(small_cnn(Scenario::TaskIncremental), 0).unwrap();
    let d = Backbone::<f32>::new(small_cnn(Scenario::DomainIncremental), 0).unwrap();
    assert_eq!(t.heads().len(), 2);
    assert_eq!(d.heads().len(), 1);
}

#[test]
fn freeze_policy() {
    let mut t = Backbone::<f32>::new(small_cnn(Scenario::TaskIncremental), 0).unwrap();
    assert!(matches!(
        t.set_frozen(FreezePolicy { normalization: false, classifier_head: true }),
        Err(Error::HeadFreezeRejected)
    ));
    t.set_frozen(FreezePolicy { normalization: true, classifier_head: false }).unwrap();
    assert!(t.norm_frozen());
    assert!(!t.head_frozen());

    let mut d = Backbone::<f32>::new(small_cnn(Scenario::DomainIncremental), 0).unwrap();
    d.set_frozen(FreezePolicy { normalization: true, classifier_head: true }).unwrap();
    assert!(d.head_frozen());
    let before: Vec<_> = d.norms().to_vec();
    let x = random_input::<f32>(vec![4, 2, 5, 5], 1);
    let masks = ones(&d);
    for _ in 0..10 {
        let (_, tape) = d.forward_train(&x, &masks, 0, NormMode::Batch).unwrap();
        d.absorb_batch_statistics(&tape);
    }
    for (a, b) in d.norms().iter().zip(&before) {
        assert!(a.bit_eq(b));
    }
}

/// Sum of logits weighted by a fixed pattern, so every output matters.
fn weighted_loss(logits: &Tensor<f64>) -> (f64, Tensor<f64>) {
    let coeffs: Vec<f64> = (0..logits.len()).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
    let loss = logits.data().iter().zip(&coeffs).map(|(a, b)| a * b).sum();
    (loss, Tensor::from_vec(logits.shape().to_vec(), coeffs).unwrap())
}

#[test]
fn backward_matches_finite_differences() {
    for mode in [NormMode::Batch, NormMode::Running] {
        let mut model = Backbone::<f64>::new(small_cnn(Scenario::TaskIncremental), 17).unwrap();
        // non-trivial running statistics and affine parameters
        for (i, n) in model.norms_mut().iter_mut().enumerate() {
            for c in 0..n.channels() {
                n.running_mean[c] = 0.1 * (c as f64) - 0.05 * i as f64;
                n.running_var[c] = 0.5 + 0.2 * c as f64;
                n.scale[c] = 1.0 + 0.1 * c as f64;
                n.shift[c] = 0.05 * c as f64;
            }
        }
        let x = random_input::<f64>(vec![3, 2, 5, 5], 5);
        let mut masks = ones(&model);
        masks[1].data_mut()[3] = 0;
        let (logits, tape) = model.forward_train(&x, &masks, 1, mode).unwrap();
        let (_, g_logits) = weighted_loss(&logits);
        let grads = model.backward(&tape, &g_logits);

        let loss_at = |m: &Backbone<f64>| {
            let (lg, _) = m.forward_train(&x, &masks, 1, mode).unwrap();
            weighted_loss(&lg).0
        };
        let h = 1e-6;
        for l in 0..model.num_maskable() {
            for i in (0..model.maskable_weight(l).len()).step_by(7) {
                let mut p = model.clone();
                p.maskable_weight_mut(l).data_mut()[i] += h;
                let mut m = model.clone();
                m.maskable_weight_mut(l).data_mut()[i] -= h;
                let fd = (loss_at(&p) - loss_at(&m)) / (2.0 * h);
                // masked-out positions: dL/dw = 0 while dL/dw' is generally not
                let analytic = grads.masked_weight[l].data()[i] * masks[l].data()[i] as f64;
                assert!((fd - analytic).abs() < 1e-5 * (1.0 + fd.abs()), "layer {l} idx {i}: {fd} vs {analytic}");
            }
            for i in 0..model.maskable_bias(l).len() {
                let mut p = model.clone();
                p.maskable_bias_mut(l)[i] += h;
                let mut m = model.clone();
                m.maskable_bias_mut(l)[i] -= h;
                let fd = (loss_at(&p) - loss_at(&m)) / (2.0 * h);
                assert!((fd - grads.bias[l][i]).abs() < 1e-5 * (1.0 + fd.abs()), "bias {l}/{i}");
            }
        }
        for l in 0..model.norms().len() {
            for c in 0..model.norms()[l].channels() {
                let mut p = model.clone();
                p.norms_mut()[l].scale[c] += h;
                let mut m = model.clone();
                m.norms_mut()[l].scale[c] -= h;
                let fd = (loss_at(&p) - loss_at(&m)) / (2.0 * h);
                assert!((fd - grads.norm_scale[l][c]).abs() < 1e-5 * (1.0 + fd.abs()));
            }
        }
        let (hi, gw, _) = grads.head.as_ref().unwrap();
        assert_eq!(*hi, 1);
        for i in 0..gw.len() {
            let mut p = model.clone();
            p.heads_mut()[1].weight.data_mut()[i] += h;
            let mut m = model.clone();
            m.heads_mut()[1].weight.data_mut()[i] -= h;
            let fd = (loss_at(&p) - loss_at(&m)) / (2.0 * h);
            assert!((fd - gw.data()[i]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }
}
