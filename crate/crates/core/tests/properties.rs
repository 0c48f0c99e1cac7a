use icnet::data::{encode_cifar10, encode_idx_images, encode_idx_labels, parse_cifar10, parse_idx_images, parse_idx_labels, LabeledDataset};
use icnet::geometry::{collision_transmit, collision_velocities, hyperplane_cos_theta, zero_crossing, CollisionInput};
use icnet::ic::{ic_dense_forward, ic_dense_piecewise, Activation, IcDenseWeights};
use icnet::nn::{conv2d, depthwise_conv2d, ConvParams};
use icnet::verify::random_spec;
use icnet::zoo::{build_model, ModelSpec, Variant};
use icnet::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Seven nested loops straight from the definition of cross-correlation.
fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Vec<f64> {
    let &[n, c_in, h, wd] = x.shape() else { unreachable!() };
    let &[c_out, _, k, _] = w.shape() else { unreachable!() };
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let (xd, wdata) = (x.data(), w.data());
    let mut out = Vec::with_capacity(n * c_out * ho * wo);
    for s in 0..n {
        for co in 0..c_out {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..c_in {
                        for u in 0..k {
                            for v in 0..k {
                                let (r, c) = ((i * stride + u) as isize - pad as isize, (j * stride + v) as isize - pad as isize);
                                if r < 0 || c < 0 || r as usize >= h || c as usize >= wd {
                                    continue;
                                }
                                acc += xd[((s * c_in + ci) * h + r as usize) * wd + c as usize]
                                    * wdata[((co * c_in + ci) * k + u) * k + v];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_loops(
        n in 1usize..3, c_in in 1usize..4, c_out in 1usize..4, k in 1usize..4,
        extra in 0usize..5, stride in 1usize..3, pad_frac in 0usize..3, bias: bool, seed: u64,
    ) {
        let pad = pad_frac.min(k / 2 + 1).min(k - 1);
        let side = k + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, &[n, c_in, side, side]);
        let w = uniform(&mut rng, &[c_out, c_in, k, k]);
        let b = uniform(&mut rng, &[c_out]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = ConvParams {
            weight: tape.constant(w.clone()),
            bias: bias.then(|| tape.constant(b.clone())),
            stride,
            padding: pad,
        };
        let y = conv2d(&mut tape, xv, &p).unwrap();
        let want = naive_conv(&x, &w, bias.then_some(&b), stride, pad);
        prop_assert!(close(tape.value(y).data(), &want, 1e-12));
    }

    #[test]
    fn depthwise_is_block_diagonal_conv(
        n in 1usize..3, c in 1usize..5, k in 1usize..4, extra in 0usize..4, stride in 1usize..3, seed: u64,
    ) {
        let pad = k / 2;
        let side = k + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, &[n, c, side, side]);
        let dw = uniform(&mut rng, &[c, k, k]);
        let mut full = Tensor::zeros(&[c, c, k, k]);
        for ch in 0..c {
            let dst = (ch * c + ch) * k * k;
            full.data_mut()[dst..dst + k * k].copy_from_slice(&dw.data()[ch * k * k..(ch + 1) * k * k]);
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let dwv = tape.constant(dw);
        let a = depthwise_conv2d(&mut tape, xv, dwv, stride, pad).unwrap();
        let p = ConvParams { weight: tape.constant(full), bias: None, stride, padding: pad };
        let b = conv2d(&mut tape, xv, &p).unwrap();
        prop_assert_eq!(tape.value(a).shape(), tape.value(b).shape());
        prop_assert!(close(tape.value(a).data(), tape.value(b).data(), 1e-12));
    }

    #[test]
    fn ic_dense_tape_equals_branch_form(
        b in 1usize..5, m in 1usize..5, n in 1usize..9, scale in 0.01f64..100.0, relu: bool, seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[b, n], |_| scale * rng.random_range(-1.0..1.0));
        let w = IcDenseWeights {
            weight: uniform(&mut rng, &[m, n]),
            w_prime: uniform(&mut rng, &[m]),
            bias_main: Some(uniform(&mut rng, &[m])),
            bias_inner: Some(uniform(&mut rng, &[m])),
        };
        let f = if relu { Activation::Relu } else { Activation::Identity };
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = w.bind(&mut tape, false);
        let y = ic_dense_forward(&mut tape, xv, &p, f).unwrap();
        let want = ic_dense_piecewise(&x, &w, f).unwrap();
        prop_assert!(close(tape.value(y).data(), want.data(), 1e-12));
    }

    #[test]
    fn idx_files_round_trip_bytes(count in 0usize..6, rows in 1usize..6, cols in 1usize..6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<u8> = (0..count * rows * cols).map(|_| rng.random()).collect();
        let labels: Vec<u8> = (0..count).map(|_| rng.random_range(0..10)).collect();
        let mut img = Vec::new();
        for v in [0x0803u32, count as u32, rows as u32, cols as u32] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend(&pixels);
        let mut lab = Vec::new();
        for v in [0x0801u32, count as u32] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend(&labels);
        let images = parse_idx_images(&img).unwrap();
        prop_assert_eq!(images.shape(), &[count, 1, rows, cols]);
        prop_assert!(images.data().iter().zip(&pixels).all(|(&v, &p)| v == p as f64 / 255.0));
        prop_assert_eq!(encode_idx_images(&images).unwrap(), img);
        let parsed = parse_idx_labels(&lab).unwrap();
        prop_assert_eq!(encode_idx_labels(&parsed).unwrap(), lab);
    }

    #[test]
    fn cifar_records_round_trip_bytes(count in 1usize..4, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bytes = Vec::new();
        for _ in 0..count {
            bytes.push(rng.random_range(0..10u8));
            bytes.extend((0..3072).map(|_| rng.random::<u8>()));
        }
        let (pixels, labels) = parse_cifar10(&bytes, 0).unwrap();
        let ds = LabeledDataset::new(Tensor::new(&[count, 3, 32, 32], pixels).unwrap(), labels, 10, "test").unwrap();
        prop_assert_eq!(encode_cifar10(&ds).unwrap(), bytes);
    }

    #[test]
    fn collisions_conserve(m1 in 0.01f64..100.0, m2 in 0.01f64..100.0, v1 in -50.0f64..50.0) {
        let (a, b) = collision_velocities(&CollisionInput { m1, m2, v1 }).unwrap();
        let scale = m1 * v1.abs() + 1e-300;
        prop_assert!((m1 * a + m2 * b - m1 * v1).abs() <= 1e-12 * scale);
        let e = m1 * v1 * v1;
        prop_assert!((m1 * a * a + m2 * b * b - e).abs() <= 1e-12 * (e + 1e-300));
        let t = collision_transmit(2.0 * m1 / (m1 + m2), v1);
        prop_assert!((t.v2 - b).abs() <= 1e-12 * (b.abs() + 1e-300));
        prop_assert_eq!(t.total, t.v1 + t.v2);
    }

    #[test]
    fn cos_theta_falls_through_zero_at_mean(
        w in prop::collection::vec(-5.0f64..5.0, 2..12), a in -20.0f64..20.0, d in 1e-6f64..20.0,
    ) {
        prop_assume!(w.windows(2).any(|p| p[0] != p[1]));
        let lo = hyperplane_cos_theta(&w, a).unwrap();
        let hi = hyperplane_cos_theta(&w, a + d).unwrap();
        prop_assert!(hi < lo);
        prop_assert!(lo.abs() <= 1.0 && hi.abs() <= 1.0);
        let z = zero_crossing(&w);
        prop_assert!(hyperplane_cos_theta(&w, z).unwrap().abs() < 1e-12);
        prop_assert_eq!(lo > 0.0, a < z);
    }

    #[test]
    fn specs_survive_json_and_variants_keep_shapes(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng);
        let json = serde_json::to_string(&spec).unwrap();
        prop_assert_eq!(&ModelSpec::from_json(&json).unwrap(), &spec);
        let want = spec.infer_shapes().unwrap();
        for v in Variant::ALL {
            let s = spec.variant(v).unwrap();
            prop_assert_eq!(s.infer_shapes().unwrap(), want.clone());
            let net = build_model(&s, seed).unwrap();
            prop_assert_eq!(net.output_shape(), want.last().unwrap().as_slice());
        }
    }
}
