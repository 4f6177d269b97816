//! Full-catalog ranking and HR@k / NDCG@k.

use std::fmt::Write as _;

use ndarray::Array1;
use rayon::prelude::*;

use crate::corpus::{DatasetSplit, EvalTarget};
use crate::error::{Error, Result};
use crate::prompts::{
    render, truncate_history, Regime, RenderedPrompt, Task, TemplateSet, UNSEEN_TEMPLATE_ID,
};
use crate::recommender::Recommender;

pub const METRIC_NAMES: [&str; 4] = ["HR@5", "NDCG@5", "HR@10", "NDCG@10"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingResult {
    pub user_index: usize,
    /// All items, best first.
    pub ranking: Vec<usize>,
    /// 1-based.
    pub rank_of_target: usize,
}

/// Sorts item indices by descending score, ties by ascending index.
pub fn rank_scores(scores: &Array1<f64>) -> Result<Vec<usize>> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score for item {i}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

pub fn rank_items(
    model: &Recommender,
    prompt: &RenderedPrompt,
    user: usize,
    target: usize,
) -> Result<RankingResult> {
    let ranking = rank_scores(&model.item_scores(prompt)?)?;
    let rank_of_target = ranking
        .iter()
        .position(|&i| i == target)
        .ok_or(Error::OutOfRange {
            what: "target item",
            index: target,
            len: ranking.len(),
        })?
        + 1;
    Ok(RankingResult {
        user_index: user,
        ranking,
        rank_of_target,
    })
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Template used for a user under a regime: seen templates cycle by user
/// index, the unseen regime always uses the held-out template.
pub fn eval_template_id(regime: Regime, user: usize) -> usize {
    match regime {
        Regime::Seen => user % UNSEEN_TEMPLATE_ID,
        Regime::Unseen => UNSEEN_TEMPLATE_ID,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn eval_prompt(
    model: &Recommender,
    split: &DatasetSplit,
    templates: &TemplateSet,
    task: Task,
    regime: Regime,
    which: EvalTarget,
    user: usize,
    max_history: usize,
) -> Result<RenderedPrompt> {
    let u = split.users.get(user).ok_or(Error::OutOfRange {
        what: "user",
        index: user,
        len: split.n_users(),
    })?;
    let history = u.eval_history(which);
    let template = templates.get(task, eval_template_id(regime, user))?;
    render(
        template,
        &model.vocab,
        user,
        truncate_history(&history, max_history),
        u.eval_target(which),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSlice {
    pub task: Task,
    pub regime: Regime,
    /// In [`METRIC_NAMES`] order.
    pub values: [f64; 4],
    pub n_users: usize,
}

impl MetricSlice {
    pub fn hr10(&self) -> f64 {
        self.values[2]
    }

    /// Bounds, monotonicity in k and NDCG <= HR.
    pub fn check_invariants(&self) -> Result<()> {
        let [h5, n5, h10, n10] = self.values;
        let ok = self.values.iter().all(|v| (0.0..=1.0).contains(v))
            && h5 <= h10
            && n5 <= n10
            && n5 <= h5
            && n10 <= h10;
        if ok {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "metric invariants violated for {}/{}: {:?}",
                self.task.name(),
                self.regime.name(),
                self.values
            )))
        }
    }
}

/// Mean HR@5, NDCG@5, HR@10, NDCG@10 over 1-based ranks, summed in order.
pub fn metrics_from_ranks(ranks: &[usize]) -> Result<[f64; 4]> {
    if ranks.is_empty() {
        return Err(Error::invalid("no users to evaluate"));
    }
    let mut sums = [0.0f64; 4];
    for &r in ranks {
        sums[0] += hr_at_k(r, 5);
        sums[1] += ndcg_at_k(r, 5);
        sums[2] += hr_at_k(r, 10);
        sums[3] += ndcg_at_k(r, 10);
    }
    Ok(sums.map(|s| s / ranks.len() as f64))
}

/// Ranks every user's target under one task and regime.
pub fn evaluate(
    model: &Recommender,
    split: &DatasetSplit,
    templates: &TemplateSet,
    task: Task,
    regime: Regime,
    which: EvalTarget,
    max_history: usize,
) -> Result<(MetricSlice, Vec<RankingResult>)> {
    if split.n_users() == 0 {
        return Err(Error::invalid("no users to evaluate"));
    }
    let rankings = (0..split.n_users())
        .into_par_iter()
        .map(|u| {
            let prompt = eval_prompt(model, split, templates, task, regime, which, u, max_history)?;
            rank_items(model, &prompt, u, split.users[u].eval_target(which))
        })
        .collect::<Result<Vec<_>>>()?;
    let ranks: Vec<usize> = rankings.iter().map(|r| r.rank_of_target).collect();
    let slice = MetricSlice {
        task,
        regime,
        values: metrics_from_ranks(&ranks)?,
        n_users: ranks.len(),
    };
    slice.check_invariants()?;
    Ok((slice, rankings))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub which: EvalTarget,
    pub slices: Vec<MetricSlice>,
}

pub type RankingDump = Vec<(Task, Regime, Vec<RankingResult>)>;

pub fn which_name(which: EvalTarget) -> &'static str {
    match which {
        EvalTarget::Val => "val",
        EvalTarget::Test => "test",
    }
}

/// Both tasks under both regimes.
pub fn evaluate_all(
    model: &Recommender,
    split: &DatasetSplit,
    templates: &TemplateSet,
    which: EvalTarget,
    max_history: usize,
) -> Result<(EvalReport, RankingDump)> {
    let mut slices = Vec::new();
    let mut dump = Vec::new();
    for task in Task::ALL {
        for regime in Regime::ALL {
            let (slice, rankings) =
                evaluate(model, split, templates, task, regime, which, max_history)?;
            slices.push(slice);
            dump.push((task, regime, rankings));
        }
    }
    Ok((EvalReport { which, slices }, dump))
}

impl EvalReport {
    pub fn slice(&self, task: Task, regime: Regime) -> Option<&MetricSlice> {
        self.slices
            .iter()
            .find(|s| s.task == task && s.regime == regime)
    }

    /// `task regime metric value n_users`, one record per line, after
    /// `# key=value` header lines.
    pub fn to_tsv(&self, header: &[(&str, String)]) -> String {
        let mut out = String::new();
        for (k, v) in header {
            let _ = writeln!(out, "# {k}={v}");
        }
        let _ = writeln!(out, "# which={}", which_name(self.which));
        out.push_str("task\tregime\tmetric\tvalue\tn_users\n");
        for s in &self.slices {
            for (name, v) in METRIC_NAMES.iter().zip(s.values) {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{name}\t{v}\t{}",
                    s.task.name(),
                    s.regime.name(),
                    s.n_users
                );
            }
        }
        out
    }
}

/// `task regime user rank_of_target item,item,...` per line.
pub fn ranking_dump_tsv(dump: &RankingDump) -> String {
    let mut out = String::from("task\tregime\tuser\trank\tranking\n");
    for (task, regime, rankings) in dump {
        for r in rankings {
            let items: Vec<String> = r.ranking.iter().map(usize::to_string).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                task.name(),
                regime.name(),
                r.user_index,
                r.rank_of_target,
                items.join(",")
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nanolm::final_hidden;
    use crate::testutil::fixture;
    use proptest::prelude::*;

    #[test]
    fn closed_form_metrics() {
        assert_eq!(hr_at_k(7, 5), 0.0);
        assert_eq!(hr_at_k(7, 10), 1.0);
        assert_eq!(hr_at_k(1, 5), 1.0);
        assert_eq!(ndcg_at_k(1, 5), 1.0);
        assert_eq!(ndcg_at_k(3, 5), 0.5);
        assert_eq!(ndcg_at_k(6, 5), 0.0);
        assert_eq!(metrics_from_ranks(&[1]).unwrap(), [1.0; 4]);
        assert!(metrics_from_ranks(&[]).is_err());
    }

    #[test]
    fn ties_break_by_index() {
        let order = rank_scores(&Array1::from_elem(6, 0.25)).unwrap();
        assert_eq!(order, vec![0, 1, 2, 3, 4, 5]);
        let order = rank_scores(&Array1::from(vec![0.1, 0.5, 0.1, 0.5])).unwrap();
        assert_eq!(order, vec![1, 3, 0, 2]);
        assert!(rank_scores(&Array1::from(vec![0.1, f64::NAN])).is_err());
    }

    #[test]
    fn logit_and_probability_orderings_agree() {
        // Exhaustive over every target of a 10-item instance, with ties.
        let logits = Array1::from(vec![0.3, -1.2, 2.5, 0.3, 0.0, 7.0, -3.0, 2.5, 1.1, 0.3]);
        let m = logits.fold(f64::NEG_INFINITY, |a: f64, &b| a.max(b));
        let e = logits.mapv(|v| (v - m).exp());
        let probs = &e / e.sum();
        let by_logit = rank_scores(&logits).unwrap();
        let by_prob = rank_scores(&probs).unwrap();
        assert_eq!(by_logit, by_prob);
        for target in 0..10 {
            // Brute force: count items strictly better or tied with lower index.
            let brute = 1
                + (0..10)
                    .filter(|&j| {
                        probs[j] > probs[target] || (probs[j] == probs[target] && j < target)
                    })
                    .count();
            assert_eq!(
                by_logit.iter().position(|&i| i == target).unwrap() + 1,
                brute
            );
        }
    }

    #[test]
    fn dominant_item_row_ranks_first() {
        let fx = fixture(1);
        let mut model = fx.embedding_model();
        let split = &fx.split;
        let prompt = eval_prompt(
            &model,
            split,
            &fx.templates,
            Task::Sequential,
            Regime::Seen,
            EvalTarget::Test,
            0,
            20,
        )
        .unwrap();
        let (seq, _) = model.sequence(&prompt.scoring_prefix()).unwrap();
        let z = final_hidden(&model.backbone, None, &seq).unwrap();
        let target = 13;
        let row = model.vocab.item_token(target).unwrap();
        model
            .backbone
            .tok_emb
            .row_mut(row)
            .assign(&(&z * (10.0 / z.dot(&z))));
        // Item tokens are not inputs in embedding mode, so z is unchanged.
        let r = rank_items(&model, &prompt, 0, target).unwrap();
        assert_eq!(r.rank_of_target, 1);
        assert_eq!(r.ranking[0], target);
    }

    #[test]
    fn constant_model_hits_at_chance() {
        // 400 users over 100 items with zeroed token rows: every ranking is
        // the index order, so HR@10 is the share of targets below 10.
        let fx = fixture(2);
        let data = crate::corpus::SyntheticConfig {
            n_users: 400,
            n_items: 100,
            n_clusters: 1,
            items_per_user: 3,
            noise_rate: 1.0,
            seed: 17,
        };
        let log = crate::corpus::generate_synthetic(&data).unwrap();
        let catalog = crate::corpus::build_catalog(&log);
        let split = crate::corpus::leave_one_out_split(&log, &catalog).unwrap();
        let vocab =
            crate::prompts::Vocabulary::build(&fx.templates, catalog.len(), &log.dataset_name, 400)
                .unwrap();
        let mut cf = fx.cf.clone();
        cf.user_factors = ndarray::Array2::zeros((400, cf.d_cf()));
        cf.item_factors = ndarray::Array2::zeros((catalog.len(), cf.d_cf()));
        let mut model = Recommender::with_embeddings(vocab, &fx.model_config, cf, 16, 1).unwrap();
        model.backbone.tok_emb.fill(0.0);
        let (slice, rankings) = evaluate(
            &model,
            &split,
            &fx.templates,
            Task::Straightforward,
            Regime::Seen,
            EvalTarget::Test,
            20,
        )
        .unwrap();
        assert!((slice.hr10() - 0.1).abs() <= 0.05, "{}", slice.hr10());
        assert!(rankings
            .iter()
            .all(|r| r.ranking == (0..catalog.len()).collect::<Vec<_>>()));
    }

    #[test]
    fn metrics_match_brute_force_over_dump() {
        let fx = fixture(3);
        let model = fx.embedding_model();
        let (report, dump) =
            evaluate_all(&model, &fx.split, &fx.templates, EvalTarget::Val, 20).unwrap();
        assert_eq!(report.slices.len(), 4);
        for ((task, regime, rankings), slice) in dump.iter().zip(&report.slices) {
            assert_eq!((slice.task, slice.regime), (*task, *regime));
            // Independent recomputation: find the target in each stored ranking.
            let mut sums = [0.0f64; 4];
            for r in rankings {
                let target = fx.split.users[r.user_index].val_target;
                let rank = r.ranking.iter().position(|&i| i == target).unwrap() + 1;
                let mut sorted = r.ranking.clone();
                sorted.sort_unstable();
                assert_eq!(sorted, (0..fx.split.n_items).collect::<Vec<_>>());
                sums[0] += if rank <= 5 { 1.0 } else { 0.0 };
                sums[1] += if rank <= 5 {
                    1.0 / (rank as f64 + 1.0).log2()
                } else {
                    0.0
                };
                sums[2] += if rank <= 10 { 1.0 } else { 0.0 };
                sums[3] += if rank <= 10 {
                    1.0 / (rank as f64 + 1.0).log2()
                } else {
                    0.0
                };
            }
            let n = rankings.len() as f64;
            assert_eq!(slice.values, sums.map(|s| s / n));
        }
        let again = evaluate_all(&model, &fx.split, &fx.templates, EvalTarget::Val, 20).unwrap();
        assert_eq!(again.0, report);
    }

    #[test]
    fn report_has_sixteen_records() {
        let fx = fixture(4);
        let model = fx.text_model();
        let (report, dump) =
            evaluate_all(&model, &fx.split, &fx.templates, EvalTarget::Test, 20).unwrap();
        let text = report.to_tsv(&[("seed", "4".into())]);
        let records: Vec<&str> = text
            .lines()
            .filter(|l| !l.starts_with('#'))
            .skip(1)
            .collect();
        assert_eq!(records.len(), 16);
        assert!(text.contains("sequential\tunseen\tHR@10"));
        assert!(text.starts_with("# seed=4\n# which=test\n"));
        assert_eq!(
            ranking_dump_tsv(&dump).lines().count(),
            1 + 4 * fx.split.n_users()
        );
    }

    #[test]
    fn seen_templates_cycle_by_user() {
        assert_eq!(eval_template_id(Regime::Seen, 0), 0);
        assert_eq!(eval_template_id(Regime::Seen, 23), 3);
        assert_eq!(eval_template_id(Regime::Unseen, 23), UNSEEN_TEMPLATE_ID);
    }

    proptest! {
        #[test]
        fn metric_bounds_hold(ranks in proptest::collection::vec(1usize..200, 1..50)) {
            let slice = MetricSlice {
                task: Task::Sequential,
                regime: Regime::Seen,
                values: metrics_from_ranks(&ranks).unwrap(),
                n_users: ranks.len(),
            };
            prop_assert!(slice.check_invariants().is_ok());
        }

        #[test]
        fn rankings_are_permutations(scores in proptest::collection::vec(-3i32..3, 1..40)) {
            let s = Array1::from(scores.iter().map(|&v| v as f64).collect::<Vec<_>>());
            let mut order = rank_scores(&s).unwrap();
            for w in order.windows(2) {
                prop_assert!(s[w[0]] > s[w[1]] || (s[w[0]] == s[w[1]] && w[0] < w[1]));
            }
            order.sort_unstable();
            prop_assert_eq!(order, (0..s.len()).collect::<Vec<_>>());
        }
    }
}
