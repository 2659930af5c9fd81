//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Criteria 7-9 train the desk-scale benchmark on
//! three seeds and take a while on one core.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use bid::data::{
    build_dataset, ActionSegment, AnnotatedSequence, GeneratorConfig, LoadedDataset, MotionSequence, Split,
};
use bid::diff::{grad_check, grad_check_params, Graph, ParamStore, Reduction, Tensor2D};
use bid::eval::{
    average_precision, checkpoint_purity, default_score_thresholds, evaluate_checkpoint, map_report,
    random_code_baseline, temporal_iou, Detection, GroundTruth, IOU_THRESHOLDS,
};
use bid::model::{
    boundary_decode, boundary_targets, encode, init_pretrain_params, interior_decode, pretrain_forward,
    run_length_decode, segments_from_codes, total_loss, Batch, ClassifierHead, LossWeights, NetConfig, Quantize,
};
use bid::quantizer::{nearest_code, project_down, project_up, rvq_quantize, straight_through, Codebook};
use bid::trainer::{finetune, pretrain, Ablation, Checkpoint, EncoderInit, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor2D<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn micro_net() -> NetConfig {
    NetConfig {
        joints: 4,
        feature_dim: 8,
        code_dim: 4,
        ..NetConfig::default()
    }
}

fn micro_sequence(t: usize, joints: usize, seed: u64) -> AnnotatedSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..t * joints).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let seq = MotionSequence::new(t, joints, frames, 30).unwrap();
    AnnotatedSequence::new(
        seq,
        vec![ActionSegment::new(1, t / 2, 0), ActionSegment::new(t / 2 + 1, t, 1)],
    )
    .unwrap()
}

// ---------------------------------------------------------------- 1

fn gradients() -> Outcome {
    const EPS: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    let mut note = |name: &str, err: f64, tol: f64| -> Result<(), String> {
        worst = worst.max(err);
        check(err < tol, format!("{name}: rel error {err:.2e} >= {tol:.0e}"))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for dilation in [1, 3, 9] {
        for trial in 0..3 {
            let c_in = rng.random_range(1..=8);
            let c_out = rng.random_range(1..=8);
            let t = rng.random_range(4..=32);
            let k = [1, 3, 9][rng.random_range(0..3)];
            let s = 100 * dilation as u64 + trial;
            let (x, w, b) = (
                random(c_in, 2 * t, s),
                random(c_out, c_in * k, s + 1),
                random(c_out, 1, s + 2),
            );
            let r = grad_check(&[x, w, b], t, EPS, |g, v| g.conv1d(v[0], v[1], Some(v[2]), dilation))
                .map_err(|e| e.to_string())?;
            note(&format!("conv1d d={dilation} k={k}"), r.max_rel_error, 1e-5)?;
        }
    }
    let r = grad_check(
        &[random(5, 12, 1), random(3, 5, 2), random(3, 1, 3)],
        12,
        EPS,
        |g, v| g.linear(v[0], v[1], Some(v[2])),
    )
    .map_err(|e| e.to_string())?;
    note("linear", r.max_rel_error, 1e-5)?;

    // relu with every input at least 0.1 away from the kink
    let x = random(4, 10, 4).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 });
    let r = grad_check(&[x], 10, EPS, |g, v| Ok(g.relu(v[0]))).map_err(|e| e.to_string())?;
    note("relu", r.max_rel_error, 1e-5)?;

    let cfg = micro_net();
    let t = 8;
    let store = init_pretrain_params::<f64>(&cfg, 3);
    let feats = random(cfg.feature_dim, 2 * t, 5);
    let low_proj = random(cfg.code_dim, 2 * t, 6);
    for normalize in [false, true] {
        let r = grad_check_params(&store, "quantizer.down", t, EPS, |g, s| {
            let f = g.constant(feats.clone());
            let low = project_down(g, s, f, normalize)?;
            g.dot(low, low_proj.clone())
        })
        .map_err(|e| e.to_string())?;
        note("projection down", r.max_rel_error, 1e-5)?;
    }
    let codes = random(cfg.code_dim, 2 * t, 7);
    let up_proj = random(cfg.feature_dim, 2 * t, 8);
    let r = grad_check_params(&store, "quantizer.up", t, EPS, |g, s| {
        let z = g.constant(codes.clone());
        let up = project_up(g, s, z)?;
        g.dot(up, up_proj.clone())
    })
    .map_err(|e| e.to_string())?;
    note("projection up", r.max_rel_error, 1e-5)?;

    // decoders end to end, inputs fixed, every decoder parameter perturbed
    let mask: Vec<f64> = (0..2 * t).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
    let out_proj = random(cfg.joints, 2 * t, 9);
    let r = grad_check_params(&store, "decoder_u.", t, EPS, |g, s| {
        let f = g.constant(feats.clone());
        let z = g.constant(up_proj.clone());
        let y = interior_decode(g, s, &cfg, f, &mask, z)?;
        g.dot(y, out_proj.clone())
    })
    .map_err(|e| e.to_string())?;
    note("interior decoder", r.max_rel_error, 1e-5)?;
    let r = grad_check_params(&store, "decoder_b.", t, EPS, |g, s| {
        let f = g.constant(feats.clone());
        let z = g.constant(up_proj.clone());
        let y = boundary_decode(g, s, &cfg, f, z)?;
        g.dot(y, out_proj.clone())
    })
    .map_err(|e| e.to_string())?;
    note("boundary decoder", r.max_rel_error, 1e-5)?;

    let head = ClassifierHead { num_outputs: 3 };
    let mut hs = store.clone();
    head.init(&mut hs, &cfg, &mut ChaCha8Rng::seed_from_u64(10));
    let labels: Vec<usize> = (0..2 * t).map(|i| i % 3).collect();
    let r = grad_check_params(&hs, "classifier.", t, EPS, |g, s| {
        let f = g.constant(feats.clone());
        let logits = head.logits(g, s, &cfg, f)?;
        g.cross_entropy(logits, &labels, &[1.0; 16])
    })
    .map_err(|e| e.to_string())?;
    note("classifier head", r.max_rel_error, 1e-5)?;

    // straight-through with frozen codes: the gradient reaching F_low must be
    // the downstream gradient at z plus the commitment gradient at F_low
    let class = Codebook::new(random(4, cfg.code_dim, 12), 0.99).unwrap();
    let low = random(cfg.code_dim, 2 * t, 13);
    let bundle = rvq_quantize(&low, &class, &class, 1).unwrap();
    let downstream = |g: &mut Graph<f64>, z: bid::diff::Var| -> bid::Result<bid::diff::Var> {
        let up = project_up(g, &store, z)?;
        g.dot(up, up_proj.clone())
    };
    let mut g = Graph::new(t);
    let f = g.input(low.clone());
    let z = straight_through(&mut g, f, &bundle).unwrap();
    let d = downstream(&mut g, z).unwrap();
    let c = g
        .squared_error(f, &bundle.z_sum, &[1.0; 16], Reduction::MeanFrames)
        .unwrap();
    let loss = g.weighted_sum(&[(d, 1.0), (c, 0.05)]).unwrap();
    g.backward(loss).unwrap();
    let analytic = g.grad(f).unwrap().clone();
    let scalar = |zv: &Tensor2D<f64>, fv: &Tensor2D<f64>| {
        let mut g = Graph::new(t);
        let z = g.constant(zv.clone());
        let d = downstream(&mut g, z).unwrap();
        let f = g.constant(fv.clone());
        let c = g
            .squared_error(f, &bundle.z_sum, &[1.0; 16], Reduction::MeanFrames)
            .unwrap();
        g.value(d).item() + 0.05 * g.value(c).item()
    };
    let mut st_err: f64 = 0.0;
    for k in 0..low.len() {
        let bump = |base: &Tensor2D<f64>, h: f64| {
            let mut b = base.clone();
            b.data_mut()[k] += h;
            b
        };
        let dz = (scalar(&bump(&bundle.z_sum, EPS), &low) - scalar(&bump(&bundle.z_sum, -EPS), &low)) / (2.0 * EPS);
        let df = (scalar(&bundle.z_sum, &bump(&low, EPS)) - scalar(&bundle.z_sum, &bump(&low, -EPS))) / (2.0 * EPS);
        st_err = st_err.max(bid::diff::relative_error(analytic.data()[k], dz + df));
    }
    note("straight-through", st_err, 1e-5)?;

    // micro end to end: T=8, J=4, D=8, d=4, K=4, L=1, codes frozen
    let seqs = [micro_sequence(t, cfg.joints, 20), micro_sequence(t, cfg.joints, 21)];
    let batch = Batch::<f64>::from_sequences(&[&seqs[0], &seqs[1]], 2).unwrap();
    let (frozen, base) = {
        let mut g = Graph::new(t);
        let x = g.constant(batch.inputs.clone());
        let f = encode(&mut g, &store, &cfg, x).unwrap();
        let low = project_down(&mut g, &store, f, cfg.normalize_codes).unwrap();
        let feats = g.value(low).clone();
        let class = Codebook::from_samples(4, &feats, 0.99, 1).unwrap();
        let residual = Codebook::random(4, cfg.code_dim, 0.2, 0.99, 2).unwrap();
        (rvq_quantize(&feats, &class, &residual, 1).unwrap(), feats)
    };
    let weights = LossWeights::default();
    let r = grad_check_params(&store, "", t, EPS, |g, s| {
        Ok(pretrain_forward(
            g,
            s,
            &cfg,
            &batch,
            &mask,
            Quantize::Frozen {
                bundle: &frozen,
                base: &base,
            },
            &weights,
        )?
        .total)
    })
    .map_err(|e| e.to_string())?;
    note("micro end-to-end", r.max_rel_error, 1e-4)?;

    Ok(format!("worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- 2

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn quantizer_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    // (a) exhaustive scan
    let cb = Codebook::<f64>::random(16, 4, 1.0, 0.99, 3).unwrap();
    for _ in 0..1000 {
        let f: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
        let (k, _) = nearest_code(&f, &cb).map_err(|e| e.to_string())?;
        let mut best = 0;
        for j in 1..16 {
            if sq_dist(&f, cb.code(j)) < sq_dist(&f, cb.code(best)) {
                best = j;
            }
        }
        check(k == best, format!("nearest code {k}, scan found {best}"))?;
    }

    // (b) and (c): zero code in the residual codebook, L=4
    let mut entries = random(32, 4, 4);
    entries.data_mut()[..4].fill(0.0);
    let residual = Codebook::new(entries, 0.99).unwrap();
    let class = Codebook::<f64>::random(8, 4, 1.0, 0.99, 5).unwrap();
    for i in 0..100 {
        let f = random(4, 10, 100 + i);
        let b = rvq_quantize(&f, &class, &residual, 4).unwrap();
        let mut sum = b.z0.clone();
        for r in &b.residuals {
            for (s, &v) in sum.data_mut().iter_mut().zip(r.data()) {
                *s += v;
            }
        }
        check(sum == b.z_sum, "z_sum differs from z0 + sum of residuals")?;
        for c in 0..f.cols() {
            let fc = f.column(c);
            let mut partial = b.z0.column(c);
            let mut prev = sq_dist(&fc, &partial);
            for r in &b.residuals {
                for (p, v) in partial.iter_mut().zip(r.column(c)) {
                    *p += v;
                }
                let e = sq_dist(&fc, &partial);
                check(e <= prev, format!("layer error rose from {prev} to {e}"))?;
                prev = e;
            }
        }
    }

    // (d) two fixed clusters, EMA decay 0.99, 100 steps
    let centers = [[3.0, -2.0], [-4.0, 1.0]];
    let points: Vec<(usize, Vec<f64>)> = (0..128)
        .map(|i| {
            let c = i % 2;
            (
                c,
                vec![
                    centers[c][0] + rng.random_range(-0.1..0.1),
                    centers[c][1] + rng.random_range(-0.1..0.1),
                ],
            )
        })
        .collect();
    let means: Vec<Vec<f64>> = (0..2)
        .map(|c| {
            let members: Vec<&Vec<f64>> = points.iter().filter(|p| p.0 == c).map(|p| &p.1).collect();
            (0..2)
                .map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64)
                .collect()
        })
        .collect();
    let init = Tensor2D::from_vec(2, 2, [points[0].1.clone(), points[1].1.clone()].concat()).unwrap();
    let mut cb = Codebook::new(init, 0.99).unwrap();
    for _ in 0..100 {
        let assigned: Vec<(usize, Vec<f64>)> = points
            .iter()
            .map(|(_, p)| (nearest_code(p, &cb).unwrap().0, p.clone()))
            .collect();
        cb.ema_update(assigned.iter().map(|(k, p)| (*k, p.as_slice())))
            .map_err(|e| e.to_string())?;
    }
    let ema_err = (0..2)
        .map(|k| sq_dist(cb.code(k), &means[k]).sqrt())
        .fold(0.0, f64::max);
    check(ema_err < 1e-2, format!("EMA entries {ema_err:.3e} from cluster means"))?;

    // (e) joint positive scaling
    for &alpha in &[1e-3, 0.5, 7.0, 1e4] {
        let f = random(4, 50, 9);
        let scaled = f.map(|v| v * alpha);
        let a = rvq_quantize(&f, &class, &residual, 2).unwrap();
        let b = rvq_quantize(&scaled, &class.scaled(alpha), &residual.scaled(alpha), 2).unwrap();
        check(
            a.class_indices == b.class_indices && a.residual_indices == b.residual_indices,
            format!("indices changed under scale {alpha}"),
        )?;
    }
    Ok(format!("EMA error {ema_err:.2e}"))
}

// ---------------------------------------------------------------- 3

fn loss_identities(history: &[bid::trainer::EpochLog], weights: &LossWeights) -> Outcome {
    let w = LossWeights {
        lambda_bound: 1.0,
        lambda_com: 0.05,
        interior_weight: 1.0,
    };
    let t = total_loss(1.0, 2.0, 4.0, &w).map_err(|e| e.to_string())?;
    check(t == 3.2, format!("total_loss(1, 2, 4) = {t}"))?;
    check(total_loss(0.0, 0.0, 0.0, &w).unwrap() == 0.0, "total of zero terms")?;

    let s = random(4, 6, 1);
    let mut g = Graph::new(6);
    let p = g.constant(s.clone());
    let l = g.squared_error(p, &s, &[1.0; 6], Reduction::MeanElements).unwrap();
    check(g.value(l).item() == 0.0, "reconstruction loss on a zero residual")?;

    let frames = random(6, 4, 2);
    let segs = [ActionSegment::new(1, 3, 0), ActionSegment::new(4, 6, 1)];
    let bt = boundary_targets(&frames, &segs).unwrap();
    let mut g = Graph::new(6);
    let p = g.constant(bt.target.transpose());
    let l = g
        .squared_error(p, &bt.target.transpose(), &[1.0; 6], Reduction::MeanElements)
        .unwrap();
    check(g.value(l).item() == 0.0, "boundary loss on exact targets")?;

    let cb = Codebook::new(random(3, 2, 3), 0.99).unwrap();
    let f = Tensor2D::from_fn(2, 5, |r, c| cb.code(c % 3)[r]);
    let b = rvq_quantize(&f, &cb, &cb, 0).unwrap();
    check(b.commitment == 0.0, "commitment on exact codes")?;

    for h in history {
        let t = total_loss(h.interior, h.boundary, h.commitment, weights).unwrap();
        check(
            (t - h.total).abs() <= 1e-9,
            format!("epoch {} total {} vs terms {t}", h.epoch, h.total),
        )?;
    }
    Ok(format!("{} logged epochs reconstruct", history.len()))
}

// ---------------------------------------------------------------- 4

/// Greedy matching of the top `k` detections from scratch.
fn true_positives(ranked: &[&Detection], gts: &[&GroundTruth], k: usize, thr: f64) -> usize {
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for d in &ranked[..k] {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            let iou = temporal_iou(&d.segment, &g.segment);
            if !used[j] && g.sequence == d.sequence && iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1;
        }
    }
    tp
}

fn ap_oracle(dets: &[Detection], gts: &[GroundTruth], class: usize, thr: f64) -> Option<f64> {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.segment.label == class).collect();
    if gts.is_empty() {
        return None;
    }
    let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.segment.label == class).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    let pr: Vec<(f64, f64)> = (1..=ranked.len())
        .map(|k| {
            let tp = true_positives(&ranked, &gts, k, thr) as f64;
            (tp / gts.len() as f64, tp / k as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..pr.len() {
        let best_after = pr[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (pr[k].0 - prev) * best_after;
        prev = pr[k].0;
    }
    Some(ap)
}

fn random_segment(rng: &mut ChaCha8Rng, label: usize) -> ActionSegment {
    let b = rng.random_range(1..=30);
    ActionSegment::new(b, b + rng.random_range(0..15), label)
}

fn evaluation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..500 {
        let gts: Vec<GroundTruth> = (0..rng.random_range(1..=3))
            .map(|_| GroundTruth {
                sequence: rng.random_range(0..2),
                segment: random_segment(&mut rng, 0),
            })
            .collect();
        let mut dets: Vec<Detection> = (0..rng.random_range(0..=5))
            .map(|_| {
                let near = &gts[rng.random_range(0..gts.len())];
                let segment = if rng.random_bool(0.6) {
                    let s = near.segment;
                    let b = (s.begin as i64 + rng.random_range(-3..=3)).max(1) as usize;
                    ActionSegment::new(b, (s.end as i64 + rng.random_range(-3..=3)).max(b as i64) as usize, 0)
                } else {
                    random_segment(&mut rng, 0)
                };
                Detection {
                    sequence: if rng.random_bool(0.8) {
                        near.sequence
                    } else {
                        rng.random_range(0..2)
                    },
                    segment,
                    score: 0.0,
                }
            })
            .collect();
        // distinct scores keep the ranking unambiguous
        let mut scores: Vec<f64> = (0..dets.len()).map(|k| (k as f64 + 1.0) / 10.0).collect();
        for k in (1..scores.len()).rev() {
            scores.swap(k, rng.random_range(0..=k));
        }
        for (d, s) in dets.iter_mut().zip(scores) {
            d.score = s;
        }
        let thr = [0.1, 0.3, 0.5, 0.7][i % 4];
        let got = average_precision(&dets, &gts, 0, thr);
        let want = ap_oracle(&dets, &gts, 0, thr);
        let same = match (got, want) {
            (Some(a), Some(b)) => (a - b).abs() < 1e-12,
            _ => false,
        };
        check(same, format!("instance {i}: AP {got:?}, oracle {want:?}"))?;
    }

    let iou = temporal_iou(&ActionSegment::new(1, 10, 0), &ActionSegment::new(6, 15, 0));
    check((iou - 1.0 / 3.0).abs() <= 1e-12, format!("IoU {iou}"))?;

    let gts: Vec<GroundTruth> = (0..6)
        .map(|i| GroundTruth {
            sequence: i / 2,
            segment: ActionSegment::new(1 + 20 * (i % 2), 15 + 20 * (i % 2), i % 3),
        })
        .collect();
    let dets: Vec<Detection> = gts
        .iter()
        .map(|g| Detection {
            sequence: g.sequence,
            segment: g.segment,
            score: 0.9,
        })
        .collect();
    let report = map_report(&dets, &gts, 3).map_err(|e| e.to_string())?;
    for (k, &thr) in IOU_THRESHOLDS.iter().enumerate() {
        check(
            100.0 * report.map[k] == 100.0,
            format!("perfect detections give {} at {thr}", 100.0 * report.map[k]),
        )?;
    }

    for _ in 0..1000 {
        let codes: Vec<usize> = (0..rng.random_range(1..100)).map(|_| rng.random_range(0..4)).collect();
        let mut runs: Vec<ActionSegment> = Vec::new();
        for (t, &c) in codes.iter().enumerate() {
            match runs.last_mut() {
                Some(r) if r.label == c => r.end = t + 1,
                _ => runs.push(ActionSegment::new(t + 1, t + 1, c)),
            }
        }
        check(segments_from_codes(&codes) == runs, format!("runs of {codes:?}"))?;
    }
    Ok("500 AP instances, 1000 run sequences".into())
}

// ---------------------------------------------------------------- 5

fn segment_constructors() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let codes: Vec<usize> = (0..rng.random_range(1..150)).map(|_| rng.random_range(0..6)).collect();
        check(
            run_length_decode(&segments_from_codes(&codes)) == codes,
            "decode(encode(codes)) != codes",
        )?;
    }
    for i in 0..200 {
        let t = rng.random_range(1..60);
        let codes: Vec<usize> = (0..t).map(|_| rng.random_range(0..3)).collect();
        let segs = segments_from_codes(&codes);
        let frames = random(t, 5, 1000 + i);
        let b = boundary_targets(&frames, &segs).map_err(|e| e.to_string())?;
        for s in &segs {
            for row in s.begin..=s.end {
                check(
                    b.target.row(row - 1) == frames.row(s.end - 1),
                    format!("row {row} is not frame {}", s.end),
                )?;
            }
        }
    }
    Ok("1000 round trips, 200 target sets".into())
}

// ---------------------------------------------------------------- 6

fn micro_train_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.net.joints = 6;
    cfg.set_feature_dim(16);
    cfg.set_code_dim(4);
    cfg.quantizer.k_class = 8;
    cfg.quantizer.k_residual = 16;
    cfg.quantizer.num_rvq_layers = 2;
    cfg.pretrain.total_epochs = 2;
    cfg.pretrain.batch_size = 2;
    cfg.pretrain.warmup_epochs = 0;
    cfg.pretrain.decay_epochs.clear();
    cfg.mask.span_len = 4;
    cfg.usage_window = 2;
    cfg.seed = 17;
    cfg
}

fn micro_train_data() -> Vec<AnnotatedSequence> {
    let g = GeneratorConfig {
        train_count: 6,
        test_count: 0,
        min_len: 16,
        max_len: 24,
        joints: 6,
        min_clips: 1,
        max_clips: 2,
        min_clip_len: 5,
        transition_len: 2,
        ..GeneratorConfig::default()
    };
    build_dataset(&g, 5).unwrap().sequences
}

fn determinism(first: &Checkpoint, cfg: &TrainConfig, data: &[AnnotatedSequence]) -> Outcome {
    let refs: Vec<&AnnotatedSequence> = data.iter().collect();
    let second = pretrain(&refs, cfg).map_err(|e| e.to_string())?.checkpoint;
    let a = first
        .to_container()
        .and_then(|c| c.to_bytes())
        .map_err(|e| e.to_string())?;
    let b = second
        .to_container()
        .and_then(|c| c.to_bytes())
        .map_err(|e| e.to_string())?;
    check(a == b, "two runs with one seed give different checkpoints")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("micro.ckpt");
    first.save(&path).map_err(|e| e.to_string())?;
    let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let c = back
        .to_container()
        .and_then(|c| c.to_bytes())
        .map_err(|e| e.to_string())?;
    check(c == a, "reloaded checkpoint serializes differently")?;
    let forward = |store: &ParamStore<f32>| {
        let batch = Batch::<f32>::from_sequences(&refs[..2], 0).unwrap();
        let mut g = Graph::new(batch.seq_len);
        let x = g.constant(batch.inputs.clone());
        let f = encode(&mut g, store, &cfg.net, x).unwrap();
        let low = project_down(&mut g, store, f, cfg.net.normalize_codes).unwrap();
        g.value(low).clone()
    };
    let (fa, fb) = (forward(&first.store), forward(&back.store));
    check(
        fa.data().iter().zip(fb.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
        "forward output changed after reload",
    )?;
    check(
        first.class_codes(&data[0]).unwrap() == back.class_codes(&data[0]).unwrap(),
        "codes changed after reload",
    )?;
    Ok(format!("{} checkpoint bytes identical", a.len()))
}

// ---------------------------------------------------------------- 7, 8, 9

const SEEDS: [u64; 3] = [0, 1, 2];

struct SeedRun {
    pretrained: Vec<f64>,
    pretrained_avg: f64,
    scratch_avg: f64,
    ablations: Vec<(Ablation, f64)>,
    purity: f64,
    chance: f64,
}

fn desk_run(seed: u64) -> bid::Result<SeedRun> {
    let gen = GeneratorConfig::default();
    let data = LoadedDataset::from_generated(&build_dataset(&gen, seed)?);
    let (train, labeled, test) = (data.split(Split::Train), data.labeled_train(), data.split(Split::Test));
    let c = gen.num_classes();
    let th = default_score_thresholds();
    let mut base = TrainConfig::desk();
    base.seed = seed;

    let run = |cfg: &TrainConfig| -> bid::Result<(Checkpoint, f64, Vec<f64>)> {
        let pre = pretrain(&train, cfg)?.checkpoint;
        let ft = finetune(EncoderInit::Pretrained(&pre), &labeled, c, cfg)?;
        let r = evaluate_checkpoint(&ft.checkpoint, &test, c, &th)?;
        Ok((pre, 100.0 * r.average, r.map.iter().map(|m| 100.0 * m).collect()))
    };
    let (pre, pretrained_avg, pretrained) = run(&base)?;
    let sc = finetune(EncoderInit::Scratch, &labeled, c, &base)?;
    let scratch_avg = 100.0 * evaluate_checkpoint(&sc.checkpoint, &test, c, &th)?.average;

    let purity = checkpoint_purity(&pre, &test, c)?.class_purity();
    let labels: Vec<Vec<usize>> = test.iter().map(|s| s.frame_labels(c)).collect();
    let (_, chance) = random_code_baseline(&labels, base.quantizer.k_class, c + 1, 100, seed)?;

    let mut ablations = Vec::new();
    for v in [Ablation::NoMask, Ablation::NoInterior, Ablation::NoBoundary] {
        let mut cfg = base.clone();
        v.apply(&mut cfg);
        ablations.push((v, run(&cfg)?.1));
    }
    Ok(SeedRun {
        pretrained,
        pretrained_avg,
        scratch_avg,
        ablations,
        purity,
        chance,
    })
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn transfer(runs: &[SeedRun]) -> Outcome {
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.2}/{:.2}", r.pretrained_avg, r.scratch_avg))
        .collect();
    let gain = mean(runs.iter().map(|r| r.pretrained_avg)) - mean(runs.iter().map(|r| r.scratch_avg));
    let at01 = mean(runs.iter().map(|r| r.pretrained[0]));
    let detail = format!(
        "pretrained/scratch Avg per seed {}; gain {gain:.2}; pretrained mAP@0.1 {at01:.2}",
        per_seed.join(" ")
    );
    check(gain >= 5.0 && at01 >= 60.0, detail.clone())?;
    Ok(detail)
}

fn ablation_direction(runs: &[SeedRun]) -> Outcome {
    let seeds = |f: &dyn Fn(&SeedRun) -> f64| {
        runs.iter()
            .map(|r| format!("{:.2}", f(r)))
            .collect::<Vec<_>>()
            .join("/")
    };
    let full = mean(runs.iter().map(|r| r.pretrained_avg));
    let mut parts = vec![format!("full {full:.2} [{}]", seeds(&|r| r.pretrained_avg))];
    let mut ok = true;
    for (k, (v, _)) in runs[0].ablations.iter().enumerate() {
        let m = mean(runs.iter().map(|r| r.ablations[k].1));
        ok &= full >= m - 1.0;
        parts.push(format!("{} {m:.2} [{}]", v.label(), seeds(&|r| r.ablations[k].1)));
    }
    let detail = parts.join(", ");
    check(ok, detail.clone())?;
    Ok(detail)
}

fn preaction_semantics(runs: &[SeedRun]) -> Outcome {
    let p = mean(runs.iter().map(|r| r.purity));
    let c = mean(runs.iter().map(|r| r.chance));
    let detail = format!("purity {p:.3} vs chance {c:.3}");
    check(p - c >= 0.15, detail.clone())?;
    Ok(detail)
}

// ----------------------------------------------------------------

fn report(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = t0.elapsed().as_secs_f64();
    match &out {
        Ok(d) => println!("criterion {id} {name}: PASS ({d}) [{secs:.1}s]"),
        Err(d) => println!("criterion {id} {name}: FAIL ({d}) [{secs:.1}s]"),
    }
    out.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= report(1, "gradient suite", gradients);
    ok &= report(2, "quantizer suite", quantizer_suite);

    let cfg = micro_train_config();
    let data = micro_train_data();
    let micro = pretrain(&data.iter().collect::<Vec<_>>(), &cfg);
    ok &= report(3, "loss identities", || {
        let m = micro.as_ref().map_err(|e| e.to_string())?;
        loss_identities(&m.history, &cfg.loss)
    });
    ok &= report(4, "evaluation oracle", evaluation_oracle);
    ok &= report(5, "boundary and segment constructors", segment_constructors);
    ok &= report(6, "determinism", || {
        let m = micro.as_ref().map_err(|e| e.to_string())?;
        determinism(&m.checkpoint, &cfg, &data)
    });

    let t0 = Instant::now();
    let runs: Result<Vec<SeedRun>, String> = SEEDS
        .iter()
        .map(|&s| desk_run(s).map_err(|e| format!("seed {s}: {e}")))
        .collect();
    println!("desk benchmark, seeds {SEEDS:?}: {:.0}s", t0.elapsed().as_secs_f64());
    let with = |f: fn(&[SeedRun]) -> Outcome| {
        let runs = &runs;
        move || runs.as_ref().map_err(|e| e.clone()).and_then(|r| f(r))
    };
    ok &= report(7, "desk-scale transfer", with(transfer));
    ok &= report(8, "ablation direction", with(ablation_direction));
    ok &= report(9, "pre-action semantics", with(preaction_semantics));

    if !ok {
        std::process::exit(1);
    }
}
