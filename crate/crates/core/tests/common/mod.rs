#![allow(dead_code)]

use fedcsd_core::baselines::{
    ContrastiveObjective, FeatureDistill, FeatureDistillObjective, FeaturePrototypeMatrix, FedGkd, FedNova,
    FedProto, FedProx, LogitDistill, LogitDistillObjective, Moon, PrototypeAlignObjective, ProximalObjective,
};
use fedcsd_core::datagen::{dirichlet_partition, make_synthetic, ClientShard, Dataset, PartitionMode, PartitionSpec};
use fedcsd_core::engine::{
    fedavg_aggregate, objective_loss_and_grad, run_round, AuxTerms, Batch, CrossEntropyOnly, FedAvg,
    LocalObjective, LocalUpdate, RoundContext, RoundState, Schedule, Strategy,
};
use fedcsd_core::fedcsd::{
    adaptive_mask, aggregate_prototypes, csd_loss, forcible_mask, local_prototype, similarity_scores,
    weighted_teacher_logits, Ablation, CsdHyper, CsdObjective, DistillBatchView, FedCsd, MaskKind,
    PrototypeMatrix, PrototypeMean,
};
use fedcsd_core::rng::CounterRng;
use fedcsd_core::tensor_nn::{Activation, Architecture, ForwardTrace, Matrix, MlpModel, ParamVector};
use fedcsd_core::Result;

pub fn random_matrix(rng: &mut CounterRng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn random_model(arch: &Architecture, rng: &mut CounterRng, scale: f64) -> MlpModel {
    let values = (0..arch.layout().len()).map(|_| scale * rng.normal()).collect();
    arch.model(ParamVector::from_values(arch.layout().clone(), values).unwrap())
        .unwrap()
}

// ---------------------------------------------------------------------------
// Finite differences

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-4)` over
/// every parameter, using central differences of the full objective.
pub fn fd_max_rel_error(model: &MlpModel, objective: &dyn LocalObjective, batch: &Batch<'_>) -> f64 {
    let (_, grad) = objective_loss_and_grad(model, objective, batch).unwrap();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..grad.len() {
        let x = model.params().values()[i];
        probe.params_mut().values_mut()[i] = x + FD_STEP;
        let (up, _) = objective_loss_and_grad(&probe, objective, batch).unwrap();
        probe.params_mut().values_mut()[i] = x - FD_STEP;
        let (down, _) = objective_loss_and_grad(&probe, objective, batch).unwrap();
        probe.params_mut().values_mut()[i] = x;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = grad.values()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    worst
}

/// The distillation objective with similarity scores and mask bits frozen
/// at the values they take at one parameter point, so the loss is a smooth
/// function of the student logits alone.
pub struct FrozenCsd {
    pub frozen: DistillBatchView,
    pub mu: f64,
    pub tau: f64,
}

impl LocalObjective for FrozenCsd {
    fn aux_terms(&self, _: &ParamVector, trace: &ForwardTrace, _: &Batch<'_>) -> Result<AuxTerms> {
        let view = DistillBatchView {
            local_logits: trace.logits().clone(),
            ..self.frozen.clone()
        };
        let (loss, mut grad) = csd_loss(&view, self.tau)?;
        grad.data_mut().iter_mut().for_each(|g| *g *= self.mu);
        Ok(AuxTerms {
            loss: self.mu * loss,
            grad_logits: Some(grad),
            ..AuxTerms::default()
        })
    }
}

pub struct GradientCase {
    pub name: &'static str,
    pub max_rel_error: f64,
}

/// Gradient checks for every local objective on a two-layer tanh network
/// and a batch of 8 samples.
pub fn gradient_cases() -> Vec<GradientCase> {
    let arch = Architecture::new(vec![5, 7, 4], Activation::Tanh).unwrap();
    let mut rng = CounterRng::from_path(2024, &[0]);
    let student = random_model(&arch, &mut rng, 0.5);
    let teacher = random_model(&arch, &mut rng, 0.5);
    let previous = random_model(&arch, &mut rng, 0.5);
    let features = random_matrix(&mut rng, 8, 5, 1.0);
    let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
    let batch = Batch {
        features: &features,
        labels: &labels,
    };
    let mut cases = Vec::new();
    let mut push = |name, err| cases.push(GradientCase { name, max_rel_error: err });

    push("cross_entropy", fd_max_rel_error(&student, &CrossEntropyOnly, &batch));
    push(
        "logit_distill",
        fd_max_rel_error(&student, &LogitDistillObjective { teacher: &teacher, mu: 0.7, tau: 3.0 }, &batch),
    );
    push(
        "feature_distill",
        fd_max_rel_error(&student, &FeatureDistillObjective { teacher: &teacher, mu: 0.4 }, &batch),
    );

    // Prototype from the teacher on a separate sample, so scores are not trivial.
    let proto_data = Dataset::new(random_matrix(&mut rng, 16, 5, 1.0), (0..16).map(|i| i % 4).collect(), 4).unwrap();
    let prototype = local_prototype(&teacher, &proto_data).unwrap();
    let hyper = CsdHyper {
        mu: 0.8,
        tau: 2.0,
        ..CsdHyper::default()
    };
    let view = CsdObjective {
        teacher: &teacher,
        prototype: Some(&prototype),
        hyper,
    }
    .view(&fedcsd_core::tensor_nn::forward(&student, &features).unwrap(), &batch)
    .unwrap();
    assert!(view.mask.iter().any(|m| !m) && view.mask.iter().any(|m| *m), "mask should be mixed");
    push(
        "masked_csd",
        fd_max_rel_error(
            &student,
            &FrozenCsd {
                frozen: view,
                mu: hyper.mu,
                tau: hyper.tau,
            },
            &batch,
        ),
    );

    push(
        "fedprox",
        fd_max_rel_error(
            &student,
            &ProximalObjective {
                anchor: teacher.params(),
                mu: 0.3,
            },
            &batch,
        ),
    );
    push(
        "moon",
        fd_max_rel_error(
            &student,
            &ContrastiveObjective {
                global: &teacher,
                previous: &previous,
                mu: 0.9,
                temperature: 0.5,
            },
            &batch,
        ),
    );
    let mut protos = FeaturePrototypeMatrix::from_model(&teacher, &proto_data).unwrap();
    // Leave one class without a prototype so the skip path is exercised.
    let mut rows = Vec::new();
    let mut present = Vec::new();
    for c in 0..protos.num_classes() {
        rows.extend_from_slice(if c == 3 { &[0.0; 7][..] } else { protos.row(c) });
        present.push(c != 3);
    }
    protos = FeaturePrototypeMatrix::from_parts(4, 7, rows, present).unwrap();
    push(
        "fedproto",
        fd_max_rel_error(
            &student,
            &PrototypeAlignObjective {
                prototypes: Some(&protos),
                mu: 0.6,
            },
            &batch,
        ),
    );
    cases
}

// ---------------------------------------------------------------------------
// Brute-force oracles

fn naive_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

fn random_labels(rng: &mut CounterRng, n: usize, k: usize, missing: Option<usize>) -> Vec<usize> {
    (0..n)
        .map(|_| loop {
            let y = rng.below(k as u64) as usize;
            if Some(y) != missing {
                break y;
            }
        })
        .collect()
}

/// Maximum deviation of `local_prototype` from a per-class loop average.
pub fn oracle_prototype_rows(instances: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..instances {
        let mut rng = CounterRng::from_path(1, &[t as u64]);
        let k = 2 + rng.below(6) as usize;
        let d = 1 + rng.below(5) as usize;
        let arch = Architecture::new(vec![d, 3, k], Activation::Relu).unwrap();
        let model = random_model(&arch, &mut rng, 1.0);
        let n = 1 + rng.below(30) as usize;
        let missing = if rng.below(2) == 0 { Some(rng.below(k as u64) as usize) } else { None };
        let labels = random_labels(&mut rng, n, k, missing);
        let data = Dataset::new(random_matrix(&mut rng, n, d, 2.0), labels.clone(), k).unwrap();
        let proto = local_prototype(&model, &data).unwrap();
        let logits = model.logits(data.features()).unwrap();
        for c in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if members.is_empty() {
                assert!(!proto.is_present(c));
                assert!(proto.row(c).iter().all(|v| *v == 0.0));
                continue;
            }
            assert!(proto.is_present(c));
            for j in 0..k {
                let mut sum = 0.0;
                for &i in &members {
                    sum += logits.get(i, j);
                }
                worst = worst.max((proto.row(c)[j] - sum / members.len() as f64).abs());
            }
        }
    }
    worst
}

/// Maximum deviation of `aggregate_prototypes` (all-clients mean) from an
/// elementwise loop mean.
pub fn oracle_prototype_aggregation(instances: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..instances {
        let mut rng = CounterRng::from_path(2, &[t as u64]);
        let k = 2 + rng.below(6) as usize;
        let clients = 1 + rng.below(8) as usize;
        let locals: Vec<PrototypeMatrix> = (0..clients)
            .map(|_| {
                let present: Vec<bool> = (0..k).map(|_| rng.below(3) != 0).collect();
                let rows: Vec<f64> = (0..k * k)
                    .map(|i| if present[i / k] { 3.0 * rng.normal() } else { 0.0 })
                    .collect();
                PrototypeMatrix::from_parts(k, rows, present).unwrap()
            })
            .collect();
        let agg = aggregate_prototypes(&locals, PrototypeMean::AllClients).unwrap();
        for c in 0..k {
            assert_eq!(agg.is_present(c), locals.iter().any(|p| p.is_present(c)));
            for j in 0..k {
                let mut sum = 0.0;
                for p in &locals {
                    sum += p.row(c)[j];
                }
                worst = worst.max((agg.row(c)[j] - sum / clients as f64).abs());
            }
        }
    }
    worst
}

/// Maximum deviation of similarity scores and weighted teacher logits from
/// a direct dot/norm + softmax + multiply computation.
pub fn oracle_weighted_logits(instances: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..instances {
        let mut rng = CounterRng::from_path(3, &[t as u64]);
        let k = 2 + rng.below(8) as usize;
        let present: Vec<bool> = (0..k).map(|_| rng.below(4) != 0).collect();
        let rows: Vec<f64> = (0..k * k)
            .map(|i| if present[i / k] { 2.0 * rng.normal() } else { 0.0 })
            .collect();
        let proto = PrototypeMatrix::from_parts(k, rows.clone(), present).unwrap();
        let z: Vec<f64> = (0..k).map(|_| 2.0 * rng.normal()).collect();
        let teacher: Vec<f64> = (0..k).map(|_| 2.0 * rng.normal()).collect();
        let scores = similarity_scores(&z, &proto).unwrap();
        let cosines: Vec<f64> = (0..k).map(|c| naive_cosine(&z, &rows[c * k..(c + 1) * k])).collect();
        let expected_scores = naive_softmax(&cosines);
        let weighted = weighted_teacher_logits(&teacher, &scores).unwrap();
        for c in 0..k {
            worst = worst.max((scores[c] - expected_scores[c]).abs());
            worst = worst.max((weighted[c] - teacher[c] * expected_scores[c]).abs());
        }
    }
    worst
}

/// Number of mask bits (adaptive and forcible) that disagree with a direct
/// evaluation of the two rules.
pub fn oracle_mask_bits(instances: usize) -> usize {
    let mut mismatches = 0;
    for t in 0..instances {
        let mut rng = CounterRng::from_path(4, &[t as u64]);
        let k = 2 + rng.below(8) as usize;
        let z: Vec<f64> = if rng.below(10) == 0 {
            vec![rng.normal(); k]
        } else {
            (0..k).map(|_| 2.0 * rng.normal()).collect()
        };
        let y = rng.below(k as u64) as usize;
        let p = naive_softmax(&z);
        let adaptive = p[y] > 1.0 / k as f64;
        let mut best = 0;
        for c in 1..k {
            if z[c] > z[best] {
                best = c;
            }
        }
        let forcible = best == y;
        if adaptive_mask(&z, y).unwrap() != adaptive {
            mismatches += 1;
        }
        if forcible_mask(&z, y).unwrap() != forcible {
            mismatches += 1;
        }
        if !MaskKind::None.keep(&z, y).unwrap() {
            mismatches += 1;
        }
    }
    mismatches
}

/// Maximum deviation of `fedavg_aggregate` from a weighted loop sum, over
/// shuffled client orders.
pub fn oracle_fedavg(instances: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..instances {
        let mut rng = CounterRng::from_path(5, &[t as u64]);
        let arch = Architecture::new(vec![1 + rng.below(4) as usize, 1 + rng.below(4) as usize], Activation::Relu).unwrap();
        let clients = 1 + rng.below(8) as usize;
        let mut updates: Vec<LocalUpdate> = (0..clients)
            .map(|id| {
                let params = random_model(&arch, &mut rng, 1.0).into_params();
                LocalUpdate::new(id, params, 1 + rng.below(100) as usize, 1)
            })
            .collect();
        let total: usize = updates.iter().map(|u| u.num_samples).sum();
        let n = arch.layout().len();
        let mut expected = vec![0.0; n];
        for u in &updates {
            for i in 0..n {
                expected[i] += u.num_samples as f64 / total as f64 * u.params.values()[i];
            }
        }
        rng.shuffle(&mut updates);
        let got = fedavg_aggregate(&updates).unwrap();
        for i in 0..n {
            worst = worst.max((got.values()[i] - expected[i]).abs());
        }
    }
    worst
}

/// Shards with equal sizes: `n` rows of class `i % k` per client, so every
/// client has the same step count.
pub fn equal_shards(data: &Dataset, clients: usize) -> Vec<ClientShard> {
    let per = data.len() / clients;
    (0..clients)
        .map(|id| {
            let idx: Vec<usize> = (0..per).map(|j| id + j * clients).collect();
            ClientShard {
                client_id: id,
                dataset: data.subset(&idx).unwrap(),
                gamma: 1.0 / clients as f64,
                source_indices: idx,
            }
        })
        .collect()
}

fn collapse_shards() -> Vec<ClientShard> {
    let data = make_synthetic(4, 5, 30, 2.0, 6).unwrap();
    dirichlet_partition(
        &data,
        &PartitionSpec {
            num_clients: 4,
            beta: 0.3,
            seed: 2,
            mode: PartitionMode::LabelSkew,
        },
    )
    .unwrap()
}

/// Global parameters after each of three rounds on a small label-skewed task.
pub fn trajectory(strategy: &dyn Strategy) -> Vec<ParamVector> {
    let arch = Architecture::new(vec![5, 6, 4], Activation::Relu).unwrap();
    let shards = collapse_shards();
    let schedule = Schedule {
        local_epochs: 2,
        batch_size: 8,
        seed: 3,
        ..Schedule::default()
    };
    let ctx = RoundContext {
        arch: &arch,
        shards: &shards,
        test: None,
        schedule: &schedule,
    };
    let mut state = RoundState::initial(arch.init_params(8));
    (0..3)
        .map(|_| {
            state = run_round(&ctx, &state, strategy).unwrap().state;
            state.global.clone()
        })
        .collect()
}

/// Every auxiliary-loss method and ablation with its weight set to `mu`.
pub fn weighted_strategies(mu: f64) -> Vec<Box<dyn Strategy>> {
    let mut strategies: Vec<Box<dyn Strategy>> = vec![
        Box::new(FedProx { mu }),
        Box::new(Moon { mu, temperature: 0.5 }),
        Box::new(LogitDistill { mu, tau: 10.0 }),
        Box::new(FedGkd {
            mu,
            tau: 10.0,
            buffer_len: 3,
        }),
        Box::new(FeatureDistill { mu }),
        Box::new(FedProto { mu }),
    ];
    for ablation in [Ablation::Base, Ablation::M1, Ablation::M2, Ablation::M3, Ablation::Full] {
        let hyper = ablation.apply(CsdHyper {
            mu,
            ..CsdHyper::default()
        });
        strategies.push(Box::new(FedCsd::new(hyper).unwrap()));
    }
    strategies
}

/// Names of the zero-weight methods whose trajectory is not bit-identical
/// to FedAvg's.
pub fn collapse_mismatches() -> Vec<String> {
    let reference = trajectory(&FedAvg);
    let mut bad = Vec::new();
    for (i, s) in weighted_strategies(0.0).iter().enumerate() {
        let got = trajectory(s.as_ref());
        let same = got.iter().zip(&reference).all(|(a, b)| {
            a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        if !same {
            bad.push(format!("{} (#{i})", s.name()));
        }
    }
    bad
}

/// Largest parameter gap between FedNova and FedAvg aggregation over three
/// rounds where every client takes the same number of steps. Both continue
/// from the FedAvg state so differences do not compound.
pub fn fednova_max_deviation() -> f64 {
    let data = make_synthetic(2, 3, 12, 2.0, 1).unwrap();
    let shards = equal_shards(&data, 4);
    let arch = Architecture::new(vec![3, 4, 2], Activation::Tanh).unwrap();
    let schedule = Schedule {
        local_epochs: 2,
        batch_size: 4,
        ..Schedule::default()
    };
    let ctx = RoundContext {
        arch: &arch,
        shards: &shards,
        test: None,
        schedule: &schedule,
    };
    let mut state = RoundState::initial(arch.init_params(0));
    let mut worst = 0.0_f64;
    for _ in 0..3 {
        let a = run_round(&ctx, &state, &FedAvg).unwrap().state;
        let b = run_round(&ctx, &state, &FedNova).unwrap().state;
        for (x, y) in a.global.values().iter().zip(b.global.values()) {
            worst = worst.max((x - y).abs());
        }
        state = a;
    }
    worst
}
