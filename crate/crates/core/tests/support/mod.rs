#![allow(dead_code)]

use embedrec::corpus::{
    build_catalog, generate_synthetic, leave_one_out_split, DatasetSplit, SyntheticConfig,
};
use embedrec::nanolm::{init_lora, ModelConfig};
use embedrec::prompts::{render, Task, TemplateSet, Vocabulary};
use embedrec::recommender::Recommender;
use embedrec::rng;
use embedrec::wals::{fit_wals, Interactions, WalsConfig};
use ndarray::ArrayViewMutD;

pub const FD_EPS: f64 = 1e-3;

pub const FD_TOLERANCE: f64 = 1e-4;

/// Tensor-wise relative error `|a - n| / max(|a|, |n|)` in the Euclidean
/// norm. Two all-zero tensors compare equal.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub struct Setup {
    pub split: DatasetSplit,
    pub templates: TemplateSet,
    pub vocab: Vocabulary,
    pub model_config: ModelConfig,
    pub cf: embedrec::wals::CfModel,
}

pub fn tiny_setup(seed: u64) -> Setup {
    let data = SyntheticConfig {
        n_users: 12,
        n_items: 10,
        n_clusters: 2,
        items_per_user: 5,
        noise_rate: 0.1,
        seed,
    };
    let log = generate_synthetic(&data).unwrap();
    let catalog = build_catalog(&log);
    let split = leave_one_out_split(&log, &catalog).unwrap();
    let templates = TemplateSet::shipped();
    let vocab = Vocabulary::build(
        &templates,
        catalog.len(),
        &log.dataset_name,
        split.n_users(),
    )
    .unwrap();
    let wals = WalsConfig {
        d_cf: 6,
        n_sweeps: 3,
        seed,
        ..WalsConfig::default()
    };
    let cf = fit_wals(&Interactions::from_train_split(&split).unwrap(), &wals).unwrap();
    let model_config = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 24,
        vocab_size: 0,
        max_seq_len: 48,
        seed,
    };
    Setup {
        split,
        templates,
        vocab,
        model_config,
        cf,
    }
}

/// All trainable and frozen tensors of a recommender, by name.
pub fn all_tensors(model: &mut Recommender) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
    let mut out = model.backbone.tensors_mut();
    if let Some(l) = model.lora.as_mut() {
        out.extend(l.tensors_mut());
    }
    if let Some(e) = model.embedding.as_mut() {
        out.extend(e.projectors.tensors_mut());
    }
    out
}

/// Moves every parameter off its initial value so no gradient path is
/// trivially zero: random norm offsets, nonzero LoRA B, O(0.1) weights.
pub fn roughen(model: &mut Recommender, seed: u64) {
    let cfg = model.backbone.config.clone();
    model.lora = Some(init_lora(&cfg, 2, 4.0, seed).unwrap());
    let mut r = rng::stream(seed, 0xfd);
    for (_, mut t) in all_tensors(model) {
        let noise = rng::gaussian_matrix(&mut r, 1, t.len(), 0.1);
        for (v, n) in t.iter_mut().zip(noise.iter()) {
            *v += n;
        }
    }
}

pub fn embedding_model(s: &Setup, seed: u64) -> Recommender {
    let mut m =
        Recommender::with_embeddings(s.vocab.clone(), &s.model_config, s.cf.clone(), 12, seed)
            .unwrap();
    roughen(&mut m, seed);
    m
}

pub fn text_model(s: &Setup, seed: u64) -> Recommender {
    let mut m = Recommender::text_only(s.vocab.clone(), &s.model_config).unwrap();
    roughen(&mut m, seed);
    m
}

pub fn prompt(
    s: &Setup,
    task: Task,
    template: usize,
    user: usize,
) -> embedrec::prompts::RenderedPrompt {
    let train = &s.split.users[user].train_items;
    let (target, before) = train.split_last().unwrap();
    render(
        s.templates.get(task, template).unwrap(),
        &s.vocab,
        user,
        &before[before.len().saturating_sub(3)..],
        *target,
    )
    .unwrap()
}

/// Central difference of `f` with respect to entry `k` of tensor `ti`.
pub fn central_difference(
    model: &mut Recommender,
    ti: usize,
    k: usize,
    f: &dyn Fn(&Recommender) -> f64,
) -> f64 {
    let nudge = |m: &mut Recommender, d: f64| {
        *all_tensors(m)[ti].1.iter_mut().nth(k).unwrap() += d;
    };
    nudge(model, FD_EPS);
    let up = f(model);
    nudge(model, -2.0 * FD_EPS);
    let down = f(model);
    nudge(model, FD_EPS);
    (up - down) / (2.0 * FD_EPS)
}
