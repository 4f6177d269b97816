mod support;

use embedrec::nanolm::{backward, loss, GradRequest, HybridSequence, Position};
use embedrec::prompts::Task;
use embedrec::recommender::Recommender;
use embedrec::rng;
use support::*;

/// Flattened analytic gradients in `all_tensors` order.
fn analytic(
    model: &Recommender,
    p: &embedrec::prompts::RenderedPrompt,
) -> (Vec<String>, Vec<Vec<f64>>) {
    let g = model.example_gradients(p, true).unwrap();
    let mut names = Vec::new();
    let mut vals = Vec::new();
    for (n, t) in g.backbone.as_ref().unwrap().tensors() {
        names.push(n);
        vals.push(t.iter().copied().collect());
    }
    if let Some(l) = &g.lora {
        for (n, t) in l.tensors() {
            names.push(n);
            vals.push(t.iter().copied().collect());
        }
    }
    if let Some(pr) = &g.projectors {
        for (n, t) in pr.tensors() {
            names.push(n);
            vals.push(t.iter().copied().collect());
        }
    }
    (names, vals)
}

fn check_model(mut model: Recommender, p: &embedrec::prompts::RenderedPrompt) -> usize {
    let (names, grads) = analytic(&model, p);
    let tensor_names: Vec<String> = all_tensors(&mut model)
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    assert_eq!(names, tensor_names);
    let f = |m: &Recommender| m.loss(p).unwrap();
    let mut checked = 0;
    for (ti, g) in grads.iter().enumerate() {
        let numeric: Vec<f64> = (0..g.len())
            .map(|k| central_difference(&mut model, ti, k, &f))
            .collect();
        let e = rel_err(g, &numeric);
        assert!(e < FD_TOLERANCE, "{}: relative error {e}", names[ti]);
        assert!(
            g.iter().any(|&v| v != 0.0) || names[ti].contains("item"),
            "{} has an all-zero gradient",
            names[ti]
        );
        checked += g.len();
    }
    checked
}

#[test]
fn embedding_mode_gradients_match_finite_differences() {
    for seed in 1..=3u64 {
        let s = tiny_setup(seed);
        let model = embedding_model(&s, seed);
        let p = prompt(&s, Task::Sequential, seed as usize, seed as usize);
        let n = check_model(model, &p);
        assert!(n > 1000);
    }
}

#[test]
fn straightforward_prompt_gradients_match_finite_differences() {
    let s = tiny_setup(4);
    check_model(
        embedding_model(&s, 4),
        &prompt(&s, Task::Straightforward, 7, 2),
    );
}

#[test]
fn text_only_gradients_match_finite_differences() {
    let s = tiny_setup(5);
    check_model(text_model(&s, 5), &prompt(&s, Task::Sequential, 10, 0));
}

#[test]
fn injected_vector_gradients_match_finite_differences() {
    for seed in 1..=3u64 {
        let s = tiny_setup(seed);
        let model = embedding_model(&s, seed);
        let mut r = rng::stream(seed, 77);
        let mut positions: Vec<Position> = (0..7)
            .map(|t| {
                if t % 3 == 1 {
                    Position::Injected(rng::gaussian_matrix(&mut r, 1, 16, 1.0).row(0).to_owned())
                } else {
                    Position::Token(3 + t)
                }
            })
            .collect();
        let labels = [4, 5, 6, 7, 8, 9, 10];
        let mask = [false, true, false, true, true, false, true];
        let (_, g) = backward(
            &model.backbone,
            model.lora.as_ref(),
            &HybridSequence::new(positions.clone()),
            &labels,
            &mask,
            GradRequest::INPUTS_ONLY,
        )
        .unwrap();
        assert_eq!(g.injected.len(), 2);
        for (t, grad) in &g.injected {
            let mut numeric = Vec::new();
            for k in 0..16 {
                let mut eval = |d: f64| {
                    if let Position::Injected(v) = &mut positions[*t] {
                        v[k] += d;
                    }
                    let x = HybridSequence::new(positions.clone());
                    loss(&model.backbone, model.lora.as_ref(), &x, &labels, &mask).unwrap()
                };
                let up = eval(FD_EPS);
                let down = eval(-2.0 * FD_EPS);
                eval(FD_EPS);
                numeric.push((up - down) / (2.0 * FD_EPS));
            }
            let e = rel_err(grad.as_slice().unwrap(), &numeric);
            assert!(
                e < FD_TOLERANCE,
                "injected position {t}: relative error {e}"
            );
        }
    }
}
