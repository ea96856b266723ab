mod common;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use axum::routing::post;
use axum::{Json, Router};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use medbrain_core::evaluator::*;

/// Dense pseudo-random unit vectors keyed by token, so similarities take
/// values other than 0 and 1.
struct HashedProvider {
    dim: usize,
}

impl EmbeddingProvider for HashedProvider {
    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, EvalError> {
        Ok(tokens.iter().map(|t| hashed_vector(t, self.dim)).collect())
    }
}

fn hashed_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut h = DefaultHasher::new();
    token.hash(&mut h);
    let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Full similarity matrix, then row and column maxima.
fn oracle_scores(cand: &[String], refs: &[String], dim: usize) -> (f64, f64, f64) {
    let cv: Vec<Vec<f64>> = cand.iter().map(|t| hashed_vector(t, dim)).collect();
    let rv: Vec<Vec<f64>> = refs.iter().map(|t| hashed_vector(t, dim)).collect();
    let mut m = vec![vec![0.0; rv.len()]; cv.len()];
    for i in 0..cv.len() {
        for j in 0..rv.len() {
            m[i][j] = (0..dim).map(|k| cv[i][k] * rv[j][k]).sum();
        }
    }
    let p = m
        .iter()
        .map(|row| row.iter().cloned().fold(f64::MIN, f64::max))
        .sum::<f64>()
        / cv.len() as f64;
    let r = (0..rv.len())
        .map(|j| m.iter().map(|row| row[j]).fold(f64::MIN, f64::max))
        .sum::<f64>()
        / rv.len() as f64;
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

const WORDS: &[&str] = &[
    "fever", "rash", "pcr", "test", "skin", "lesion", "ear", "pain", "antibiotic", "the", "a", "of", "treat",
    "daybue", "rett", "syndrome", "ct", "scan",
];

fn token_list() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(WORDS).prop_map(str::to_string), 1..25)
}

#[test]
fn brute_force_oracle_on_fifty_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let provider = HashedProvider { dim: 32 };
    for _ in 0..50 {
        let mut draw = |n: usize| -> Vec<String> {
            (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect()
        };
        let cn = 1 + (draw(1)[0].len() % 7) * 3;
        let cand = draw(cn);
        let refs = draw(9);
        let got = greedy_match_scores(&cand, &refs, &provider).unwrap();
        let (p, r, f) = oracle_scores(&cand, &refs, 32);
        assert!((got.precision - p).abs() < 1e-9);
        assert!((got.recall - r).abs() < 1e-9);
        assert!((got.f1 - f).abs() < 1e-9);
    }
}

#[test]
fn hand_computed_case_is_exact() {
    let p = OneHotTestProvider::default();
    let toks = |s: &[&str]| s.iter().map(|t| t.to_string()).collect::<Vec<_>>();
    let t = greedy_match_scores(&toks(&["fever", "and", "rash"]), &toks(&["rash", "fever"]), &p).unwrap();
    assert_eq!(t.precision, 2.0 / 3.0);
    assert_eq!(t.recall, 1.0);
    assert!((t.f1 - 0.8).abs() < 1e-12);
}

#[test]
fn empty_lists_are_rejected() {
    let p = OneHotTestProvider::default();
    assert!(matches!(
        greedy_match_scores(&[], &["a".to_string()], &p),
        Err(EvalError::InvalidArgument(_))
    ));
    assert!(matches!(score_texts("fine", "...", &p), Err(EvalError::InvalidArgument(_))));
}

proptest! {
    #[test]
    fn precision_and_recall_swap_with_arguments(c in token_list(), r in token_list()) {
        let p = HashedProvider { dim: 16 };
        let cr = greedy_match_scores(&c, &r, &p).unwrap();
        let rc = greedy_match_scores(&r, &c, &p).unwrap();
        prop_assert!((cr.precision - rc.recall).abs() < 1e-12);
        prop_assert!((cr.recall - rc.precision).abs() < 1e-12);
    }

    #[test]
    fn scores_ignore_token_order(c in token_list(), r in token_list(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let p = HashedProvider { dim: 16 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut c2, mut r2) = (c.clone(), r.clone());
        c2.shuffle(&mut rng);
        r2.shuffle(&mut rng);
        let a = greedy_match_scores(&c, &r, &p).unwrap();
        let b = greedy_match_scores(&c2, &r2, &p).unwrap();
        prop_assert!((a.precision - b.precision).abs() < 1e-12);
        prop_assert!((a.recall - b.recall).abs() < 1e-12);
    }

    #[test]
    fn one_hot_scores_are_bounded(c in token_list(), r in token_list()) {
        let t = greedy_match_scores(&c, &r, &OneHotTestProvider::default()).unwrap();
        for v in [t.precision, t.recall, t.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(t.f1 <= t.precision.max(t.recall) + 1e-12);
        prop_assert!(t.f1 >= t.precision.min(t.recall) - 1e-12);
    }

    #[test]
    fn t_test_ignores_a_common_shift(
        a in prop::collection::vec(0.0f64..1.0, 2..30), noise in prop::collection::vec(-0.2f64..0.2, 30), shift in -5.0f64..5.0
    ) {
        let b: Vec<f64> = a.iter().zip(&noise).map(|(x, e)| x + e).collect();
        let a2: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let b2: Vec<f64> = b.iter().map(|x| x + shift).collect();
        let t1 = paired_t_test(&a, &b).unwrap();
        let t2 = paired_t_test(&a2, &b2).unwrap();
        prop_assume!(!t1.degenerate && t1.t.abs() < 1e6);
        prop_assert!((t1.t - t2.t).abs() <= 1e-6 * t1.t.abs().max(1.0));
        prop_assert!((t1.p_two_tailed - t2.p_two_tailed).abs() < 1e-6);
    }

    #[test]
    fn t_cdf_is_symmetric(x in -10.0f64..10.0, df in 1usize..60) {
        let df = df as f64;
        prop_assert!((t_cdf(x, df) + t_cdf(-x, df) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn t_cdf_at_zero_is_one_half() {
    for df in 1..200 {
        assert!((t_cdf(0.0, df as f64) - 0.5).abs() < 1e-12);
    }
}

/// Closed forms of the t CDF for one, two and three degrees of freedom.
fn closed_form_cdf(x: f64, df: u32) -> f64 {
    use std::f64::consts::PI;
    match df {
        1 => 0.5 + x.atan() / PI,
        2 => 0.5 + x / (2.0 * (2.0 + x * x).sqrt()),
        3 => {
            let s = 3f64.sqrt();
            0.5 + (x / (s * (1.0 + x * x / 3.0)) + (x / s).atan()) / PI
        }
        _ => unreachable!(),
    }
}

/// Composite Simpson integration of the t density from 0 to x. The density's
/// normalizing constant comes from a separate Simpson integral of the
/// unnormalized kernel, with the far tail added in closed form.
fn integrated_cdf(x: f64, df: f64) -> f64 {
    let kernel = |u: f64| (1.0 + u * u / df).powf(-(df + 1.0) / 2.0);
    let simpson = |a: f64, b: f64, n: usize| {
        let h = (b - a) / n as f64;
        let mut s = kernel(a) + kernel(b);
        for i in 1..n {
            s += kernel(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let cut: f64 = 2000.0;
    // Beyond `cut` the kernel is (u²/df)^(-(df+1)/2) to high accuracy.
    let tail = df.powf((df + 1.0) / 2.0) * cut.powf(-df) / df;
    let half_mass = simpson(0.0, 50.0, 200_000) + simpson(50.0, cut, 400_000) + tail;
    let part = simpson(0.0, x.abs(), 200_000) / half_mass;
    0.5 + 0.5 * part * x.signum()
}

#[test]
fn t_cdf_matches_closed_forms() {
    for df in 1..=3u32 {
        for i in -100..=100 {
            let x = i as f64 / 10.0;
            let got = t_cdf(x, df as f64);
            assert!((got - closed_form_cdf(x, df)).abs() < 1e-9, "df={df} x={x}");
        }
    }
}

#[test]
fn t_cdf_matches_numerical_integration() {
    for df in [4.0, 5.0, 9.0, 29.0] {
        for x in [0.3, 1.0, 2.0, 3.5, -1.7] {
            let got = t_cdf(x, df);
            let want = integrated_cdf(x, df);
            assert!((got - want).abs() < 1e-6, "df={df} x={x}: {got} vs {want}");
        }
    }
}

#[test]
fn one_two_three_paired_against_zero() {
    let t = paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
    assert_eq!(t.df, 2);
    assert!((t.t - 12f64.sqrt()).abs() < 1e-12);
    assert!((t.t - 3.4641016).abs() < 1e-6);
    let want = 2.0 * (1.0 - closed_form_cdf(t.t, 2));
    assert!((t.p_two_tailed - want).abs() < 1e-9);
    assert!((t.p_two_tailed - 0.0742).abs() < 5e-5);
    assert!(!t.degenerate);
}

#[test]
fn degenerate_and_invalid_series() {
    let same = paired_t_test(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
    assert!(same.degenerate);
    assert_eq!((same.t, same.p_two_tailed), (0.0, 1.0));
    let shifted = paired_t_test(&[1.0, 2.0], &[0.5, 1.5]).unwrap();
    assert!(shifted.degenerate && shifted.t.is_infinite() && shifted.p_two_tailed == 0.0);
    assert!(paired_t_test(&[1.0], &[0.0]).is_err());
    assert!(paired_t_test(&[1.0, 2.0], &[0.0]).is_err());
}

#[test]
fn aggregate_uses_sample_deviation() {
    let triples: Vec<ScoreTriple> = [(1.0, 1.0), (0.5, 0.5), (0.0, 0.0)]
        .iter()
        .map(|&(p, r)| ScoreTriple::new(p, r))
        .collect();
    let agg = aggregate(&triples).unwrap();
    assert_eq!(agg.n, 3);
    assert!((agg.precision.mean - 0.5).abs() < 1e-15);
    assert!((agg.precision.std - 0.5).abs() < 1e-15);
    assert_eq!(agg.f1.to_string(), "0.5000±0.5000");
    assert!(aggregate(&[]).is_err());
}

fn embedding_router(shape: &'static str) -> Router {
    Router::new().route(
        "/v1/embeddings",
        post(move |Json(body): Json<Value>| async move {
            let tokens: Vec<String> = serde_json::from_value(body["input"].clone()).unwrap();
            // Unnormalized vectors; the client must normalize them.
            let vectors: Vec<Vec<f64>> = tokens.iter().map(|t| hashed_vector(t, 8).iter().map(|x| x * 3.0).collect()).collect();
            let resp = if shape == "data" {
                let items: Vec<Value> = vectors
                    .iter()
                    .enumerate()
                    .rev()
                    .map(|(i, v)| json!({ "embedding": v, "index": i }))
                    .collect();
                json!({ "data": items })
            } else {
                json!({ "embeddings": vectors })
            };
            Json(resp)
        }),
    )
}

/// Runs the stub on its own thread and runtime, since the provider blocks.
fn spawn_stub(router: Router) -> std::net::SocketAddr {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            tx.send(common::serve(router).await).unwrap();
            std::future::pending::<()>().await;
        });
    });
    rx.recv().unwrap()
}

#[test]
fn remote_provider_matches_local_vectors() {
    let toks: Vec<String> = ["pcr", "skin", "lesion", "fever"].iter().map(|s| s.to_string()).collect();
    for shape in ["data", "plain"] {
        let addr = spawn_stub(embedding_router(shape));
        let remote = RemoteEmbeddingProvider::new(format!("http://{addr}/"), Some("test-embed".into())).unwrap();
        let got = remote.embed(&toks).unwrap();
        for (v, t) in got.iter().zip(&toks) {
            let want = hashed_vector(t, 8);
            assert!(v.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12), "{shape}");
        }
        let local = greedy_match_scores(&toks[..2], &toks[1..], &HashedProvider { dim: 8 }).unwrap();
        let viaremote = greedy_match_scores(&toks[..2], &toks[1..], &remote).unwrap();
        assert!((local.f1 - viaremote.f1).abs() < 1e-12);
    }
}

#[test]
fn remote_provider_reports_unreachable_endpoint() {
    let remote = RemoteEmbeddingProvider::new(common::dead_address(), None).unwrap();
    assert!(matches!(remote.embed(&["a".into()]), Err(EvalError::Provider(_))));
}

fn pairs(name: &str) -> Vec<ScoredPair> {
    read_pairs_jsonl(common::read_fixture(name).as_bytes()).unwrap()
}

#[test]
fn evaluate_run_composes_scores_aggregates_and_tests() {
    let a = pairs("eval_pairs_a.jsonl");
    let b = pairs("eval_pairs_b.jsonl");
    let provider = OneHotTestProvider::default();
    let report = evaluate_run(&a, &b, &provider, "ChatDoctor", "ChatGPT").unwrap();
    assert_eq!(report.pair_count, 5);

    let per_a: Vec<ScoreTriple> = a.iter().map(|p| score_texts(&p.candidate, &p.reference, &provider).unwrap()).collect();
    let per_b: Vec<ScoreTriple> = b.iter().map(|p| score_texts(&p.candidate, &p.reference, &provider).unwrap()).collect();
    assert_eq!(report.per_pair_a, per_a);
    assert_eq!(report.per_pair_b, per_b);

    let names: Vec<&str> = report.rows.iter().map(|r| r.metric.as_str()).collect();
    assert_eq!(names, ["Precision", "Recall", "F1 Score"]);
    let f1 = &report.rows[2];
    let fa: Vec<f64> = per_a.iter().map(|t| t.f1).collect();
    let fb: Vec<f64> = per_b.iter().map(|t| t.f1).collect();
    assert_eq!(f1.system_a, MeanStd::of(&fa).unwrap());
    assert_eq!(f1.test, Some(paired_t_test(&fa, &fb).unwrap()));
    assert!(f1.system_a.mean > f1.system_b.mean);

    let table = report.to_table();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "\tChatDoctor\tChatGPT\tP-value");
    assert_eq!(lines.len(), 4);
    for (line, metric) in lines[1..].iter().zip(["Precision", "Recall", "F1 Score"]) {
        let cells: Vec<&str> = line.split('\t').collect();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[0], metric);
        assert!(cells[1].contains('±') && cells[2].contains('±'));
    }
}

#[test]
fn evaluate_run_rejects_mismatched_inputs() {
    let a = pairs("eval_pairs_a.jsonl");
    let mut b = pairs("eval_pairs_b.jsonl");
    let p = OneHotTestProvider::default();
    assert!(evaluate_run(&a, &b[..4], &p, "a", "b").is_err());
    b.swap(0, 1);
    assert!(evaluate_run(&a, &b, &p, "a", "b").is_err());
    assert!(evaluate_run(&[], &[], &p, "a", "b").is_err());
    let single = evaluate_run(&a[..1], &a[..1], &p, "a", "b").unwrap();
    assert!(single.rows.iter().all(|r| r.test.is_none()));
    assert!(single.to_table().lines().nth(1).unwrap().ends_with("\tn/a"));
}
