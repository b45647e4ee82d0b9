use isp_core::data::{gen_sequence_task, Features, SplitFractions, Splits};
use isp_core::prune::Protocol;
use isp_core::rng::stream;
use isp_core::soup::{ims_run, interpolate_greedy, weak_train_candidate, SelectMetric, SoupConfig};
use isp_core::train::{evaluate, pretrain, PretrainConfig};
use isp_core::{
    AdamW, BudgetLedger, Checkpoint, DataCursor, Dataset, Model, ModelSpec, Parameter, Phase,
    Tensor,
};

fn mix(a: &Model, b: &Model, alpha: f64) -> Model {
    let mut out = a.clone();
    for (p, q) in out.params_mut().iter_mut().zip(b.params()) {
        for (x, y) in p.tensor.data_mut().iter_mut().zip(q.tensor.data()) {
            *x = (1.0 - alpha) * *x + alpha * y;
        }
    }
    out
}

fn first_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

#[test]
fn two_candidate_soup_matches_grid_table() {
    let data = gen_sequence_task(16, 4, 6, 600, 11, SplitFractions::default()).unwrap();
    let pcfg = PretrainConfig {
        epochs: 2,
        lr: 0.01,
        weight_decay: 0.01,
        batch_size: 16,
        seed: 11,
    };
    let spec = ModelSpec::transformer(16, 4, 8, 2, 1, 6);
    let pre = pretrain(spec, &data, &pcfg, &mut BudgetLedger::unlimited()).unwrap();
    let mut cfg = SoupConfig::new(2, 15, 5e-3, 11);
    cfg.subset_fraction = 0.5;
    let mut ledger = BudgetLedger::unlimited();
    let out = ims_run(&pre, &cfg, &data, &mut ledger).unwrap();

    let val = &data.splits.val;
    let acc = |m: &Model| evaluate(m, &data, val).unwrap().accuracy;
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let (c1, c2) = (&out.candidates[0], &out.candidates[1]);
    let stage1: Vec<f64> = grid.iter().map(|&a| acc(&mix(&pre.model, c1, a))).collect();
    let table: Vec<Vec<f64>> = grid
        .iter()
        .map(|&a1| {
            let m1 = mix(&pre.model, c1, a1);
            grid.iter().map(|&a2| acc(&mix(&m1, c2, a2))).collect()
        })
        .collect();
    let i1 = first_argmax(&stage1);
    let i2 = first_argmax(&table[i1]);
    assert_eq!(out.log[0].alpha, grid[i1]);
    assert_eq!(out.log[1].alpha, grid[i2]);
    assert_eq!(out.val_final.accuracy, table[i1][i2]);
    assert_eq!(out.val_initial.accuracy, table[0][0]);
    assert!(table[i1][i2] >= stage1[i1] && stage1[i1] >= stage1[0]);
    let expected = mix(&mix(&pre.model, c1, grid[i1]), c2, grid[i2]);
    for (p, q) in out.checkpoint.model.params().iter().zip(expected.params()) {
        for (x, y) in p.tensor.data().iter().zip(q.tensor.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert_eq!(ledger.phase(Phase::WeakTrain).steps, 30);
    assert_eq!(ledger.summary().eval_passes, 22);
}

fn dense(rows: &[([f64; 2], usize)], splits: Splits) -> Dataset {
    Dataset {
        features: Features::Dense {
            dim: 2,
            data: rows.iter().flat_map(|(x, _)| x.iter().copied()).collect(),
        },
        labels: rows.iter().map(|(_, y)| *y).collect(),
        classes: 2,
        splits,
        seed: 0,
    }
}

fn probe(bias: [f64; 2]) -> Model {
    let t = |s: &[usize], d: &[f64]| Tensor::new(s.to_vec(), d.to_vec()).unwrap();
    Model::from_parameters(
        ModelSpec::mlp(2, 0, 0, 2),
        vec![
            Parameter {
                name: "head.weight".into(),
                tensor: t(&[2, 2], &[1.0, -1.0, 0.0, 0.0]),
                prunable: false,
            },
            Parameter {
                name: "head.bias".into(),
                tensor: t(&[2], &bias),
                prunable: false,
            },
        ],
    )
    .unwrap()
}

#[test]
fn val_optimal_candidate_takes_the_whole_step() {
    let rows: Vec<([f64; 2], usize)> = (0..20)
        .map(|i| {
            let u = 1.0 + 0.5 * (i as f64 / 20.0);
            if i % 2 == 0 {
                ([u, 0.3], 0)
            } else {
                ([-u, -0.3], 1)
            }
        })
        .collect();
    let all: Vec<usize> = (0..20).collect();
    let data = dense(
        &rows,
        Splits {
            train: all.clone(),
            val: all.clone(),
            test: vec![],
        },
    );
    // The current model's bias drowns the signal for every α < 1.
    let current = probe([0.0, 100.0]);
    let candidate = probe([0.0, 0.0]);
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let step = interpolate_greedy(
        &candidate,
        &current,
        &data,
        &all,
        &grid,
        SelectMetric::Accuracy,
    )
    .unwrap();
    assert_eq!(step.alpha, 1.0);
    assert_eq!(step.before.accuracy, 0.5);
    assert_eq!(step.after.accuracy, 1.0);
    assert!(step.model.bit_eq(&candidate));
}

#[test]
fn weak_candidate_one_step_by_hand() {
    // 2 -> 3 relu -> 2 with six prunable first-layer weights.
    let w = [0.8, -0.05, 0.4, 0.02, -0.6, 0.3];
    let b = [0.1, 0.2, -0.1];
    let v = [0.5, -0.3, 0.2, 0.7, -0.4, 0.6];
    let c = [0.05, -0.05];
    let t = |s: &[usize], d: &[f64]| Tensor::new(s.to_vec(), d.to_vec()).unwrap();
    let param = |n: &str, tensor, prunable| Parameter {
        name: n.into(),
        tensor,
        prunable,
    };
    let model = Model::from_parameters(
        ModelSpec::mlp(2, 3, 1, 2),
        vec![
            param("layers.0.weight", t(&[2, 3], &w), true),
            param("layers.0.bias", t(&[3], &b), false),
            param("head.weight", t(&[3, 2], &v), false),
            param("head.bias", t(&[2], &c), false),
        ],
    )
    .unwrap();
    let x = [1.0, -2.0];
    let data = dense(
        &[(x, 1)],
        Splits {
            train: vec![0],
            val: vec![0],
            test: vec![],
        },
    );
    let pre = Checkpoint {
        optimizer: AdamW::new(&model, 1e-3, 0.0),
        cursor: DataCursor::new(vec![0], 1, stream(0, "cursor", &[])).unwrap(),
        model,
        step: 0,
        metrics: vec![],
    };

    // Sparsity 1/3 drops the two smallest magnitudes: w[3] = 0.02, w[1] = -0.05.
    let keep = [true, false, true, false, true, true];
    let wm: Vec<f64> = (0..6).map(|i| if keep[i] { w[i] } else { 0.0 }).collect();
    let pre_act: Vec<f64> = (0..3)
        .map(|j| x[0] * wm[j] + x[1] * wm[3 + j] + b[j])
        .collect();
    let h: Vec<f64> = pre_act.iter().map(|z| z.max(0.0)).collect();
    let logits: Vec<f64> = (0..2)
        .map(|k| (0..3).map(|j| h[j] * v[j * 2 + k]).sum::<f64>() + c[k])
        .collect();
    let z = logits[0].exp() + logits[1].exp();
    let dlogit = [logits[0].exp() / z, logits[1].exp() / z - 1.0];
    let dpre: Vec<f64> = (0..3)
        .map(|j| {
            let dh = dlogit[0] * v[j * 2] + dlogit[1] * v[j * 2 + 1];
            if pre_act[j] > 0.0 {
                dh
            } else {
                0.0
            }
        })
        .collect();
    let lr = 1e-3 * 2.0;
    let expected: Vec<f64> = (0..6)
        .map(|i| {
            if !keep[i] {
                return w[i];
            }
            let g = x[i / 3] * dpre[i % 3];
            w[i] - lr * g / (g.abs() + AdamW::DEFAULT_EPS)
        })
        .collect();

    let protocol = Protocol {
        lr_multiplier: 2.0,
        weight_decay: 0.0,
    };
    let mut ledger = BudgetLedger::unlimited();
    let cand = weak_train_candidate(
        &pre,
        1.0 / 3.0,
        protocol,
        1e-3,
        1,
        vec![0],
        &data,
        &mut ledger,
        stream(0, "weak", &[]),
    )
    .unwrap();
    let got = cand.prunable_flat();
    for i in 0..6 {
        assert!(
            (got[i] - expected[i]).abs() < 1e-12,
            "w[{i}]: {} vs {}",
            got[i],
            expected[i]
        );
    }
    assert_eq!(got[1], w[1]);
    assert_eq!(got[3], w[3]);
    assert_eq!(ledger.total_steps(), 1);
}
