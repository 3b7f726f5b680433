//! Central finite differences against the analytic gradients of every graph
//! operation and of the composite training objectives.

use mindbridge::data::{generate_cohort, CohortSpec, PooledCohort, Split};
use mindbridge::losses::LossWeights;
use mindbridge::model::{ModelConfig, ModelState, SubjectId};
use mindbridge::numerics::rng::{stream_rng, Stream};
use mindbridge::numerics::{finite_diff_check, GradCheckConfig, Graph, NodeId, Tensor};
use mindbridge::training::{adapt_loss, composite_loss, AdaptConfig, TrainConfig};
use mindbridge::numerics::Aggregation;
use mindbridge::Result;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(&mut rng))
}

/// Reduces a node to a scalar: scalars pass through, anything else is
/// compared by MSE against a fixed random tensor.
fn reduce(g: &mut Graph<f64>, y: NodeId) -> Result<NodeId> {
    let shape = g.value(y).shape().to_vec();
    if g.value(y).len() == 1 {
        return Ok(y);
    }
    let r = g.constant(random(&shape, 999));
    g.mse(y, r)
}

/// Gradient of `reduce(build(x))` with respect to `x`, checked numerically.
fn check(name: &str, x0: Tensor<f64>, training: bool, build: impl Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>) {
    let graph = || {
        if training {
            Graph::training(stream_rng(5, Stream::Dropout, &[0]))
        } else {
            Graph::new()
        }
    };
    let mut g = graph();
    let x = g.variable(x0.clone());
    let y = build(&mut g, x).unwrap();
    let loss = reduce(&mut g, y).unwrap();
    let analytic = g.backward(loss).unwrap().wrt(x);
    let shape = x0.shape().to_vec();
    let report = finite_diff_check(
        |theta| {
            let mut g = graph();
            let x = g.variable(Tensor::new(shape.clone(), theta.to_vec()).unwrap());
            let y = build(&mut g, x).unwrap();
            let loss = reduce(&mut g, y).unwrap();
            g.scalar(loss)
        },
        x0.data(),
        analytic.data(),
        GradCheckConfig::default(),
    );
    assert!(report.max_rel_error < TOL, "{name}: {report:?}");
}

#[test]
fn affine_all_inputs() {
    let (x, w, b) = (random(&[3, 4], 1), random(&[4, 5], 2), random(&[5], 3));
    check("affine/x", x.clone(), false, |g, x| {
        let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
        g.affine(x, w, Some(b))
    });
    check("affine/w", w.clone(), false, |g, w| {
        let (x, b) = (g.constant(x.clone()), g.constant(b.clone()));
        g.affine(x, w, Some(b))
    });
    check("affine/b", b, false, |g, b| {
        let (x, w) = (g.constant(x.clone()), g.constant(w.clone()));
        g.affine(x, w, Some(b))
    });
    check("matmul", w, false, |g, w| {
        let x = g.constant(x.clone());
        g.matmul(x, w)
    });
}

#[test]
fn elementwise_and_shape_ops() {
    let x = random(&[3, 4], 4);
    check("gelu", x.clone(), false, |g, x| g.gelu(x));
    check("add", x.clone(), false, |g, x| {
        let c = g.constant(random(&[3, 4], 5));
        let y = g.add(x, c)?;
        g.add(y, x)
    });
    check("sum", x.clone(), false, |g, x| {
        let y = g.gelu(x)?;
        g.sum(y)
    });
    check("reshape", x.clone(), false, |g, x| {
        let y = g.reshape(x, &[2, 6])?;
        g.gelu(y)
    });
    check("weighted_sum", x.clone(), false, |g, x| {
        let a = g.sum(x)?;
        let y = g.gelu(x)?;
        let b = g.sum(y)?;
        g.weighted_sum(&[(a, 0.3), (b, -2.0)])
    });
    check("dropout", x, true, |g, x| g.dropout(x, 0.4));
}

#[test]
fn detach_blocks_the_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(random(&[2, 3], 15));
    let d = g.detach(x);
    let y = g.gelu(d).unwrap();
    let s = g.sum(y).unwrap();
    assert!(g.backward(s).unwrap().wrt(x).data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_all_inputs() {
    let (x, gamma, beta) = (random(&[4, 6], 6), random(&[6], 7), random(&[6], 8));
    check("layer_norm/x", x.clone(), false, |g, x| {
        let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        g.layer_norm(x, ga, be, 1e-5)
    });
    check("layer_norm/gamma", gamma.clone(), false, |g, ga| {
        let (x, be) = (g.constant(x.clone()), g.constant(beta.clone()));
        g.layer_norm(x, ga, be, 1e-5)
    });
    check("layer_norm/beta", beta, false, |g, be| {
        let (x, ga) = (g.constant(x.clone()), g.constant(gamma.clone()));
        g.layer_norm(x, ga, be, 1e-5)
    });
}

#[test]
fn pooling_normalization_and_losses() {
    check("adaptive_max_pool", random(&[3, 11], 9), false, |g, x| g.adaptive_max_pool(x, 4));
    check("l2_normalize_rows", random(&[3, 5], 10), false, |g, x| g.l2_normalize_rows(x));
    let targets = random(&[4, 6], 11);
    check("soft_clip", random(&[4, 6], 12), false, |g, p| g.soft_clip(p, &targets, 0.7));
    check("soft_clip/normalized", random(&[4, 6], 13), false, |g, p| {
        let p = g.l2_normalize_rows(p)?;
        let t = mindbridge::losses::normalize_rows(&targets)?;
        g.soft_clip(p, &t, 0.125)
    });
    check("mse/both", random(&[2, 3], 14), false, |g, x| {
        let y = g.gelu(x)?;
        g.mse(y, x)
    });
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        pooled_size: 8,
        hidden_size: 6,
        adapter_rank: 3,
        translator_blocks: 2,
        image_tokens: 2,
        image_channels: 3,
        text_tokens: 2,
        text_channels: 2,
        ..ModelConfig::default()
    }
}

fn tiny_cohort(n_subjects: usize) -> PooledCohort<f64> {
    let spec = CohortSpec {
        n_subjects,
        voxel_min: 10,
        voxel_max: 14,
        latent_dim: 3,
        n_train: 6,
        n_test: 3,
        image_tokens: 2,
        image_channels: 3,
        text_tokens: 2,
        text_channels: 2,
        ..CohortSpec::default()
    };
    PooledCohort::new(&generate_cohort(&spec).unwrap(), 8, Aggregation::Max).unwrap()
}

/// Unit weights: the default 1e4 text weight scales the loss so far up that
/// round-off in the central difference dominates at `eps = 1e-5`.
fn unit_weights() -> TrainConfig {
    TrainConfig {
        weights: LossWeights { image: 1.0, text: 1.0, rec: 1.0, cyc: 1.0 },
        ..TrainConfig::default()
    }
}

fn flat_params(state: &ModelState<f64>) -> Vec<f64> {
    state.named_params().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

fn set_flat(state: &mut ModelState<f64>, theta: &[f64]) {
    let mut offset = 0;
    for (_, t) in state.named_params_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&theta[offset..offset + n]);
        offset += n;
    }
}

/// Checks the gradient of `objective` with respect to every model parameter.
fn check_model(name: &str, eps: f64, state: &ModelState<f64>, objective: impl Fn(&ModelState<f64>, &mut Graph<f64>) -> NodeId) {
    let mut g = Graph::new();
    let loss = objective(state, &mut g);
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<f64> = state
        .named_params()
        .iter()
        .flat_map(|(n, t)| grads.param(n).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())).data().to_vec())
        .collect();
    let theta = flat_params(state);
    let mut probe = state.clone();
    let report = finite_diff_check(
        |th| {
            set_flat(&mut probe, th);
            let mut g = Graph::new();
            let loss = objective(&probe, &mut g);
            g.scalar(loss)
        },
        &theta,
        &analytic,
        GradCheckConfig { eps, max_coords: usize::MAX, ..GradCheckConfig::default() },
    );
    assert!(report.coords_checked == theta.len());
    assert!(report.max_rel_error < TOL, "{name}: {report:?}");
}

#[test]
fn composite_objective_variants() {
    let cohort = tiny_cohort(2);
    let ids = cohort.subject_ids();
    let state = ModelState::<f64>::init(tiny_model(), &ids, 3).unwrap();
    let batch = cohort.gather(&ids[0], Split::Train, &[0, 2, 4]).unwrap();
    // The two-way cycle composes four subject networks, and its truncation
    // error at eps = 1e-5 is above tolerance on one coordinate.
    let variants = [
        ("full", 1e-5, unit_weights()),
        ("no_mse", 1e-5, TrainConfig { enable_mse: false, ..unit_weights() }),
        ("raw_clip", 1e-5, TrainConfig { normalize_clip: false, ..unit_weights() }),
        ("symmetric", 1e-6, TrainConfig { symmetric_cycle: true, ..unit_weights() }),
    ];
    for (name, eps, cfg) in variants {
        check_model(name, eps, &state, |s, g| composite_loss(s, g, &batch, &ids[1], &cfg, 0).unwrap().0);
    }
}

#[test]
fn adaptation_objective() {
    let cohort = tiny_cohort(2);
    let ids = cohort.subject_ids();
    let state = ModelState::<f64>::init(tiny_model(), &ids, 4).unwrap();
    let real = cohort.gather(&ids[1], Split::Train, &[1, 3, 5]).unwrap();
    let pseudo = cohort.gather(&ids[0], Split::Train, &[0, 1, 2]).unwrap();
    let cfg = unit_weights();
    for adapt in [
        AdaptConfig::default(),
        AdaptConfig { pseudo_supervised: true, ..AdaptConfig::default() },
    ] {
        check_model("adapt", 1e-5, &state, |s, g| {
            adapt_loss(s, g, &real, Some(&pseudo), &ids[0], &cfg, &adapt, 0).unwrap().0
        });
    }
}

#[test]
fn self_cycle_with_one_subject() {
    let cohort = tiny_cohort(1);
    let id: SubjectId = cohort.subject_ids()[0].clone();
    let state = ModelState::<f64>::init(tiny_model(), std::slice::from_ref(&id), 5).unwrap();
    let batch = cohort.gather(&id, Split::Train, &[0, 1, 2]).unwrap();
    let cfg = unit_weights();
    check_model("self_cycle", 1e-5, &state, |s, g| composite_loss(s, g, &batch, &id, &cfg, 0).unwrap().0);
}
