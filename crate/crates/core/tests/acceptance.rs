//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Expected values are computed here, independently of the
//! library code under test.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use ontoguide::classify::{bce_gradient, bce_loss, train_head, ClassifierHead, Example, TrainConfig};
use ontoguide::decode::{apply_bias, softmax_mass, BiasPlan, BiasSpec, LogitVector, PredictionSet, SlotTriple};
use ontoguide::harness::dataset::ingest_dataset;
use ontoguide::harness::feasibility::{min_ram_gb, Device, ModelProfile};
use ontoguide::harness::{
    ablate, evaluate_records, feasibility, sweep, Config, Engine, FeasibilitySpec, DEFAULT_GRID,
};
use ontoguide::metrics::{evaluate, multi_sis, sis, EvalInstance};
use ontoguide::ontology::Ontology;
use ontoguide::prompt::PromptVariant;
use ontoguide::retrieve::{retrieve, Encoder, MockEncoder, NodeIndex, RetrievalConfig};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Ancestors of `id` from itself up to the root, via parent links only.
fn ancestors(o: &Ontology, id: &str) -> Vec<String> {
    let mut out = vec![id.to_string()];
    let mut cur = id.to_string();
    while let Some(p) = o.parent_of(&cur).unwrap() {
        out.push(p.id.clone());
        cur = p.id.clone();
    }
    out
}

/// Wu-Palmer style similarity from ancestor chains; the root sits at depth 0.
fn oracle_sis(o: &Ontology, u: &str, v: &str) -> f64 {
    let au = ancestors(o, u);
    let av = ancestors(o, v);
    let lca = au.iter().find(|a| av.contains(a)).expect("shared root");
    let depth = |chain: &[String], id: &str| chain.len() - 1 - chain.iter().position(|a| a == id).unwrap();
    let d_lca = depth(&au, lca) as f64;
    2.0 * d_lca / ((au.len() - 1) as f64 + (av.len() - 1) as f64)
}

fn sis_golden() -> Verdict {
    let o = Ontology::from_path(fixtures().join("travel.json")).map_err(|e| e.to_string())?;
    let s = sis(&o, "BookFlight", "BookResort").map_err(|e| e.to_string())?;
    check(close(s, 1.0 / 3.0, 1e-9), format!("sis(BookFlight, BookResort) = {s}"))?;
    for n in o.intent_nodes() {
        let s = sis(&o, &n.id, &n.id).map_err(|e| e.to_string())?;
        check(s == 1.0, format!("sis({0}, {0}) = {s}", n.id))?;
    }
    let cross = sis(&o, "BookFlight", "OrderPizza").map_err(|e| e.to_string())?;
    check(cross == 0.0, format!("cross-domain sis = {cross}"))?;
    Ok(format!("sis(BookFlight, BookResort) = {s:.12}, self = 1, cross-domain = 0"))
}

fn feasibility_golden() -> Verdict {
    let m = min_ram_gb(1.50);
    check(m == 25.0, format!("M_min(1.50) = {m:?}, expected 25.0"))?;
    let spec = FeasibilitySpec {
        device: Device { ram_gb: 8.0, max_latency_ms: 300.0, max_energy_j: 1.0 },
        model: ModelProfile { size_gb: 0.48, latency_ms: 100.0, energy_j: 0.5 },
    };
    let r = feasibility(&spec).map_err(|e| e.to_string())?;
    check(
        r.feasible,
        format!(
            "0.48 GB on (8 GB, 300 ms, 1 J): ratio {:?} is not below the 0.06 bound, so the strict rule says infeasible \
             ({})",
            r.ram_ratio,
            r.reasons.join("; ")
        ),
    )?;
    Ok(format!("M_min(1.50) = 25.0, 0.48 GB on 8 GB feasible (ratio {})", r.ram_ratio))
}

const WORDS: &[&str] = &[
    "alpha", "bank", "card", "delta", "email", "flight", "garden", "hotel", "invoice", "jacket", "kitchen", "lamp",
    "music", "news", "order", "photo", "quote", "radio", "shop", "ticket", "umbrella", "video", "wallet", "xray",
    "yoga", "zone", "book", "cancel", "track", "refund", "rent", "search", "compare", "review", "pay", "deliver",
];

fn phrase(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// 10 domains, 90 categories and 4,900 leaves.
fn synthetic_ontology(rng: &mut ChaCha8Rng) -> Ontology {
    let mut nodes = Vec::new();
    for d in 0..10 {
        nodes.push(json!({"id": format!("D{d}"), "label": phrase(rng, 2), "description": phrase(rng, 4)}));
        for c in 0..9 {
            let cat = format!("D{d}C{c}");
            nodes.push(json!({"id": cat, "label": phrase(rng, 2), "description": phrase(rng, 4), "parent": format!("D{d}")}));
        }
    }
    for l in 0..4900 {
        let parent = format!("D{}C{}", l % 10, (l / 10) % 9);
        nodes.push(json!({"id": format!("L{l:04}"), "label": phrase(rng, 3), "description": phrase(rng, 6), "parent": parent}));
    }
    Ontology::from_json(&json!({ "nodes": nodes }).to_string()).unwrap()
}

fn retrieval_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5000);
    let o = synthetic_ontology(&mut rng);
    check(o.intent_nodes().count() == 5000, "synthetic ontology size")?;
    let enc = MockEncoder::default();
    let index = NodeIndex::build(&o, &enc).map_err(|e| e.to_string())?;
    let mut timings = Vec::new();
    let settings = [(1, -1.0), (5, -1.0), (10, 0.0), (20, 0.2)];
    for q in 0..1000 {
        let words = rng.random_range(1..8);
        let query = phrase(&mut rng, words);
        let (k, theta) = settings[q % settings.len()];
        let cfg = RetrievalConfig { k, theta, ..RetrievalConfig::default() };
        let start = Instant::now();
        let got = retrieve(&o, &index, &query, &enc, &cfg).map_err(|e| e.to_string())?;
        timings.push(start.elapsed());

        let qv = enc.encode(&query).map_err(|e| e.to_string())?;
        let qv = qv.values();
        let qn = qv.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut all: Vec<(String, f64)> = (0..index.len())
            .map(|i| {
                let v = index.vector(i);
                let dot: f64 = qv.iter().zip(v).map(|(a, b)| a * b).sum();
                let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                (index.ids()[i].clone(), dot / (qn * vn))
            })
            .filter(|(_, s)| *s >= theta)
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        all.truncate(k);
        let got_ids: Vec<&String> = got.scored.iter().map(|(id, _)| id).collect();
        let want_ids: Vec<&String> = all.iter().map(|(id, _)| id).collect();
        check(got_ids == want_ids, format!("query {q} `{query}`: got {got_ids:?}, brute force {want_ids:?}"))?;
        for ((_, a), (_, b)) in got.scored.iter().zip(&all) {
            check(close(*a, *b, 1e-12), format!("query {q}: similarity {a} vs {b}"))?;
        }
    }
    timings.sort();
    let median = timings[timings.len() / 2];
    check(median < Duration::from_millis(5), format!("median query time {median:?} is not under 5 ms"))?;
    Ok(format!("1000/1000 queries match brute force over 5000 nodes, median {median:?}"))
}

fn bias_properties() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = DEFAULT_GRID;
    let (mut steps, mut strict) = (0, 0);
    for case in 0..1000 {
        let n = rng.random_range(2..80);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let lv = LogitVector::new(logits.clone()).map_err(|e| e.to_string())?;
        let size = rng.random_range(1..n);
        let mut ids: Vec<u32> = (0..n as u32).collect();
        ids.shuffle(&mut rng);
        let boosted: BTreeSet<u32> = ids[..size].iter().copied().collect();
        let plan = BiasPlan::all_vocab(boosted.clone());

        let same = apply_bias(&lv, &plan, &BiasSpec::new(0.0, 0.0)).map_err(|e| e.to_string())?;
        check(
            same.values().iter().zip(&logits).all(|(a, b)| a.to_bits() == b.to_bits()),
            format!("case {case}: zero bias changed the logits"),
        )?;

        let mass = |beta: f64, gamma: f64| -> Result<f64, String> {
            let biased = apply_bias(&lv, &plan, &BiasSpec::new(beta, gamma)).map_err(|e| e.to_string())?;
            Ok(softmax_mass(&biased, &boosted))
        };
        for &fixed in &grid {
            for w in grid.windows(2) {
                let (a, b) = (mass(w[0], fixed)?, mass(w[1], fixed)?);
                check(b > a - 1e-12, format!("case {case}: mass fell from {a} to {b} as beta went {} -> {}", w[0], w[1]))?;
                strict += usize::from(b > a);
                let (a, b) = (mass(fixed, w[0])?, mass(fixed, w[1])?);
                check(b > a - 1e-12, format!("case {case}: mass fell from {a} to {b} as gamma went {} -> {}", w[0], w[1]))?;
                strict += usize::from(b > a);
                steps += 2;
            }
        }
    }
    Ok(format!("identity bit-exact; mass rose on {strict}/{steps} grid steps, the rest equal within 1e-12"))
}

/// Best injective assignment between the two sets by exhaustive search.
fn exhaustive_sis(o: &Ontology, pred: &[String], gold: &[String]) -> f64 {
    fn best(o: &Ontology, small: &[String], large: &[String], used: &mut Vec<bool>) -> f64 {
        let Some((first, rest)) = small.split_first() else { return 0.0 };
        let mut top = f64::NEG_INFINITY;
        for j in 0..large.len() {
            if !used[j] {
                used[j] = true;
                top = top.max(oracle_sis(o, first, &large[j]) + best(o, rest, large, used));
                used[j] = false;
            }
        }
        top
    }
    let (small, large) = if pred.len() <= gold.len() { (pred, gold) } else { (gold, pred) };
    best(o, small, large, &mut vec![false; large.len()]) / pred.len().max(gold.len()) as f64
}

fn matching_oracle() -> Verdict {
    let o = Ontology::from_path(fixtures().join("mobile_intents.json")).map_err(|e| e.to_string())?;
    let ids: Vec<String> = o.intent_nodes().map(|n| n.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut worst: f64 = 0.0;
    for case in 0..500 {
        let n = rng.random_range(0..=6);
        let pred: Vec<String> = ids.choose_multiple(&mut rng, n).cloned().collect();
        let n = rng.random_range(1..=6);
        let gold: Vec<String> = ids.choose_multiple(&mut rng, n).cloned().collect();
        let want = exhaustive_sis(&o, &pred, &gold);
        let got = multi_sis(&o, &pred.iter().cloned().collect(), &gold.iter().cloned().collect())
            .map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
        check(close(got, want, 1e-9), format!("case {case}: multi_sis {got} vs exhaustive {want}"))?;
    }
    Ok(format!("500/500 instances agree, max difference {worst:.1e}"))
}

fn metric_golden() -> Verdict {
    let o = Ontology::from_path(fixtures().join("travel.json")).map_err(|e| e.to_string())?;
    let set = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<BTreeSet<String>>();
    let slot = |v: &str| SlotTriple::new("travel", "destination", v);
    let inst = |id: &str, pred: &[&str], pslots: Vec<SlotTriple>, gold: &[&str], gslots: Vec<SlotTriple>| {
        let mut prediction = PredictionSet::generated(pred.iter().copied());
        prediction.slots = pslots.into_iter().collect();
        EvalInstance { id: id.into(), prediction, gold_intents: set(gold), gold_slots: gslots.into_iter().collect() }
    };
    let instances = vec![
        inst("a", &["BookFlight"], vec![slot("lisbon")], &["BookFlight"], vec![slot("lisbon")]),
        inst("b", &["BookFlight", "BookResort"], vec![], &["BookFlight", "BookResort"], vec![]),
        inst("c", &["BookResort"], vec![slot("rome")], &["BookFlight"], vec![slot("paris")]),
        inst("d", &["OrderPizza", "BookFlight"], vec![], &["BookFlight"], vec![]),
    ];
    let r = evaluate(&o, &instances).map_err(|e| e.to_string())?;
    // exact, exact, one level-1 LCA pair (2*1/6), one of two matched exactly (1/2)
    let avg = (1.0 + 1.0 + 1.0 / 3.0 + 0.5) / 4.0;
    check(r.em == 0.5, format!("EM = {}", r.em))?;
    check(
        r.slot_precision == 0.5 && r.slot_recall == 0.5 && r.slot_f1 == 0.5,
        format!("slot P/R/F1 = {}/{}/{}", r.slot_precision, r.slot_recall, r.slot_f1),
    )?;
    check(close(r.avg_sis, avg, 1e-9), format!("avg SIS {} vs {avg}", r.avg_sis))?;
    Ok(format!("EM 0.5, P=R=F1=0.5, avg SIS {:.12} (= 17/24)", r.avg_sis))
}

struct Setup {
    cfg: Config,
    ontology: Ontology,
    index: NodeIndex,
    encoder: MockEncoder,
    runtime: ontoguide::harness::Runtime,
}

impl Setup {
    fn load() -> Result<Self, String> {
        let cfg = Config::load(Some(&fixtures().join("synthetic.toml"))).map_err(|e| e.to_string())?;
        let ontology = Ontology::from_path(cfg.ontology.clone().ok_or("config names no ontology")?)
            .map_err(|e| e.to_string())?;
        let encoder = MockEncoder::default();
        let index = cfg.node_index(&ontology, &encoder).map_err(|e| e.to_string())?;
        let runtime = cfg.runtime(&ontology).map_err(|e| e.to_string())?;
        Ok(Setup { cfg, ontology, index, encoder, runtime })
    }

    fn engine(&self) -> Engine<'_> {
        Engine {
            ontology: &self.ontology,
            index: &self.index,
            encoder: &self.encoder,
            backend: self.runtime.backend.as_ref(),
            tokenizer: &self.runtime.tokenizer,
        }
    }
}

fn end_to_end() -> Verdict {
    let start = Instant::now();
    let s = Setup::load()?;
    let records = ingest_dataset(fixtures().join("synthetic_eval.jsonl")).map_err(|e| e.to_string())?;
    check(records.len() == 200, format!("{} records", records.len()))?;
    let pipeline = s.cfg.pipeline().map_err(|e| e.to_string())?;
    check(pipeline.classifier.is_some(), "fixture config loads no head")?;
    let runs = ablate(&s.engine(), &records, &pipeline, s.cfg.eval.workers).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (full_name, full) = runs.iter().find(|(n, _)| n == "full").ok_or("no full run")?;
    let mut summary = Vec::new();
    for (name, run) in &runs {
        summary.push(format!("{name} {:.1}%/{:.3}", 100.0 * run.report.em, run.report.avg_sis));
        if name == full_name {
            continue;
        }
        check(full.report.em >= run.report.em, format!("full EM {} < {name} EM {}", full.report.em, run.report.em))?;
        check(
            full.report.avg_sis >= run.report.avg_sis,
            format!("full SIS {} < {name} SIS {}", full.report.avg_sis, run.report.avg_sis),
        )?;
    }
    let base = &runs.iter().find(|(n, _)| n == "base").ok_or("no base run")?.1;
    check(
        full.report.em >= base.report.em + 0.05,
        format!("full EM {} is not 5 points above base EM {}", full.report.em, base.report.em),
    )?;
    check(elapsed < Duration::from_secs(30), format!("took {elapsed:?}"))?;
    Ok(format!("{} in {elapsed:.2?}", summary.join(", ")))
}

fn sweep_shape() -> Verdict {
    let s = Setup::load()?;
    let records = ingest_dataset(fixtures().join("synthetic_eval.jsonl")).map_err(|e| e.to_string())?;
    let mut cfg = s.cfg.clone();
    cfg.ablation.classifier = false;
    let pipeline = cfg.pipeline().map_err(|e| e.to_string())?;
    let mut streamed = 0;
    let out = sweep(&s.engine(), &records, &pipeline, &DEFAULT_GRID, &DEFAULT_GRID, cfg.eval.workers, |_| streamed += 1)
        .map_err(|e| e.to_string())?;
    if let Some(e) = out.error {
        return Err(e.to_string());
    }
    check(out.rows.len() == 36 && streamed == 36, format!("{} rows", out.rows.len()))?;
    let mut groups: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for row in &out.rows {
        let mass = row.bias_mass.ok_or(format!("no bias mass at beta {} gamma {}", row.beta, row.gamma))?;
        groups.entry(row.gamma.to_bits()).or_default().push((row.beta, mass));
    }
    for (gamma, rows) in &groups {
        let mut rows = rows.clone();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in rows.windows(2) {
            check(
                w[1].1 >= w[0].1,
                format!("gamma {}: mass {} at beta {} fell to {} at beta {}", f64::from_bits(*gamma), w[0].1, w[0].0, w[1].1, w[1].0),
            )?;
        }
    }
    Ok(format!("36 rows, bias mass non-decreasing in beta for all {} gamma groups", groups.len()))
}

fn random_head(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> ClassifierHead {
    let mut head = ClassifierHead::zeros((0..rows).map(|i| format!("N{i}")).collect(), dim, 0.5);
    head.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
    head.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
    head
}

fn classifier_checks() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let (rows, dim) = (rng.random_range(1..5), rng.random_range(1..7));
        let head = random_head(&mut rng, rows, dim);
        let data: Vec<Example> = (0..rng.random_range(1..10))
            .map(|_| Example {
                features: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                labels: (0..rows).filter(|_| rng.random_bool(0.5)).map(|i| format!("N{i}")).collect(),
            })
            .collect();
        let (gw, gb) = bce_gradient(&head, &data).map_err(|e| e.to_string())?;
        let h = 1e-5;
        let numeric = |bump: &dyn Fn(&mut ClassifierHead, f64)| -> Result<f64, String> {
            let (mut up, mut down) = (head.clone(), head.clone());
            bump(&mut up, h);
            bump(&mut down, -h);
            Ok((bce_loss(&up, &data).map_err(|e| e.to_string())? - bce_loss(&down, &data).map_err(|e| e.to_string())?)
                / (2.0 * h))
        };
        let mut compare = |analytic: f64, numeric: f64, what: String| -> Result<(), String> {
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale < 1e-9 { 0.0 } else { (analytic - numeric).abs() / scale };
            worst = worst.max(rel);
            check(rel <= 1e-4, format!("case {case} {what}: analytic {analytic} vs numeric {numeric}"))
        };
        for (i, g) in gw.iter().enumerate() {
            compare(*g, numeric(&|hd, d| hd.weights[i] += d)?, format!("weight {i}"))?;
        }
        for (i, g) in gb.iter().enumerate() {
            compare(*g, numeric(&|hd, d| hd.bias[i] += d)?, format!("bias {i}"))?;
        }
    }

    // node A iff x0 > 0, node B iff x1 > 0, with a margin around each boundary
    let mut sample = |n: usize| -> Vec<Example> {
        let mut out = Vec::new();
        while out.len() < n {
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            if x[0].abs() < 0.1 || x[1].abs() < 0.1 {
                continue;
            }
            let labels = [("A", x[0] > 0.0), ("B", x[1] > 0.0)].iter().filter(|(_, on)| *on).map(|(l, _)| l.to_string()).collect();
            out.push(Example { features: x, labels });
        }
        out
    };
    let (train, held_out) = (sample(300), sample(200));
    let trained = train_head(&train, vec!["A".into(), "B".into()], 8, &TrainConfig::default()).map_err(|e| e.to_string())?;
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for ex in &held_out {
        let pred: BTreeSet<String> = trained.head.classify(&ex.features).map_err(|e| e.to_string())?.into_iter().collect();
        tp += pred.intersection(&ex.labels).count() as f64;
        fp += pred.difference(&ex.labels).count() as f64;
        fn_ += ex.labels.difference(&pred).count() as f64;
    }
    let f1 = 2.0 * tp / (2.0 * tp + fp + fn_);
    check(f1 >= 0.95, format!("held-out micro-F1 {f1}"))?;
    Ok(format!("gradient max relative error {worst:.1e}, held-out micro-F1 {f1:.3}"))
}

fn prompt_robustness() -> Verdict {
    let s = Setup::load()?;
    let records = ingest_dataset(fixtures().join("synthetic_eval.jsonl")).map_err(|e| e.to_string())?;
    let mut ems = Vec::new();
    for variant in PromptVariant::ALL {
        let mut cfg = s.cfg.clone();
        cfg.ablation.classifier = false;
        cfg.ablation.symbolic_integration = true;
        cfg.ablation.logit_biasing = true;
        cfg.prompt.variant = variant;
        let pipeline = cfg.pipeline().map_err(|e| e.to_string())?;
        let run = evaluate_records(&s.engine(), &records, &pipeline, cfg.eval.workers).map_err(|e| e.to_string())?;
        ems.push((variant.name(), run.report.em));
    }
    let first = ems[0].1;
    check(ems.iter().all(|(_, em)| *em == first), format!("EM differs across variants: {ems:?}"))?;
    Ok(format!("EM {:.1}% for all {} variants", 100.0 * first, ems.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("sis golden", sis_golden),
        ("feasibility golden", feasibility_golden),
        ("retrieval oracle", retrieval_oracle),
        ("bias identity and monotonicity", bias_properties),
        ("matching oracle", matching_oracle),
        ("metric harness golden", metric_golden),
        ("end-to-end direction", end_to_end),
        ("sweep shape", sweep_shape),
        ("classifier", classifier_checks),
        ("prompt robustness", prompt_robustness),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        match std::panic::catch_unwind(run) {
            Ok(Ok(detail)) => println!("PASS {n:>2} {name}: {detail}"),
            Ok(Err(why)) => {
                println!("FAIL {n:>2} {name}: {why}");
                failed.push(n);
            }
            Err(_) => {
                println!("FAIL {n:>2} {name}: panicked");
                failed.push(n);
            }
        }
    }
    println!("acceptance: {}/{} criteria pass", criteria.len() - failed.len(), criteria.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
