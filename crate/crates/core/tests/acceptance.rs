//! End-to-end acceptance run on the reference desk configuration.
//!
//! Prints one PASS/FAIL line per check and exits non-zero if any fails.
//! Run with `cargo test -p privneuron-core --test acceptance`.
//!
//! `PRIVNEURON_ACCEPTANCE_CONFIG` points at a TOML file replacing the
//! default configuration; `PRIVNEURON_ACCEPTANCE_DIR` keeps the run
//! directories instead of using a temporary one.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use privneuron::corpus::{PiiType, Prompt};
use privneuron::metrics::{mean, reciprocal_rank, MrrScore};
use privneuron::neurons::{partition, NeuronSets, Quadrature};
use privneuron::nn::{ActivationHook, InterventionSpec, Matrix, ModelConfig, NeuronRef, TransformerModel};
use privneuron::pipeline::stages::probe_sets;
use privneuron::pipeline::{Pipeline, PipelineConfig, Report, Stage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;
const AVERAGED_SEEDS: usize = 3;

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> Check {
    Check { name, pass, detail }
}

fn fmt_trace(t: &[f64]) -> String {
    let parts: Vec<String> = t.iter().map(|v| format!("{v:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn mean_traces<'a>(traces: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let traces: Vec<&[f64]> = traces.collect();
    (0..traces[0].len())
        .map(|l| mean(&traces.iter().map(|t| t[l]).collect::<Vec<_>>()))
        .collect()
}

fn metric_exactness() -> Check {
    let logits = [0.9, 0.5, 0.2, 0.4, 0.1];
    let ranks: Vec<_> = (0..3).map(|t| reciprocal_rank(&logits, t).unwrap()).collect();
    let fixture = MrrScore::from_ranks(ranks).unwrap().value == 7.0 / 12.0;
    let ties = (0..6u32).all(|t| reciprocal_rank(&[0.0f32; 6], t).unwrap().rank == t as usize + 1)
        && reciprocal_rank(&[1.0, 3.0, 3.0, 0.0], 2).unwrap().rank == 2;

    let mut worst: f64 = 0.0;
    for (v, tie) in [(7usize, false), (300, true), (300, false)] {
        let mut m = TransformerModel::<f64>::new(ModelConfig {
            tie_embeddings: tie,
            ..ModelConfig::desk(v)
        })
        .unwrap();
        for t in m.weights.tensors_mut() {
            t.data.fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(v as u64);
        let texts: Vec<Vec<u32>> = (0..8)
            .map(|_| (0..rng.random_range(2..40)).map(|_| rng.random_range(0..v as u32)).collect())
            .collect();
        let ppl = m.valid_ppl(&texts, &InterventionSpec::new()).unwrap().value;
        worst = worst.max(((ppl - v as f64) / v as f64).abs());
    }
    check(
        "metric exactness",
        fixture && ties && worst < 1e-9,
        format!("7/12 fixture {fixture}, ties {ties}, uniform PPL rel err {worst:.1e}"),
    )
}

struct Nudge {
    pos: usize,
    neuron: NeuronRef,
    eps: f64,
}

impl ActivationHook<f64> for Nudge {
    fn forward(&self, layer: usize, acts: &mut Matrix<f64>) {
        if layer == self.neuron.layer {
            let v = acts.get(self.pos, self.neuron.index);
            acts.set(self.pos, self.neuron.index, v + self.eps);
        }
    }
    fn backward(&self, _: usize, _: &mut Matrix<f64>) {}
}

fn gradient_correctness() -> Check {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        d_ff: 32,
        n_heads: 4,
        vocab_size: 23,
        context_len: 24,
        seed: 4,
        tie_embeddings: true,
    };
    let mut m = TransformerModel::<f64>::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for t in m.weights.tensors_mut() {
        for x in t.data.iter_mut() {
            if t.decay {
                *x *= 10.0;
            } else {
                *x += rng.random_range(-0.3..0.3);
            }
        }
    }
    let x: Vec<u32> = (0..7).map(|_| rng.random_range(0..23)).collect();
    let full = m.greedy_decode(&x, 3, &InterventionSpec::new()).unwrap();
    let y = full[x.len()..].to_vec();
    let grads = m.neuron_gradients(&x, &y, &InterventionSpec::new()).unwrap();
    let n_pos = x.len() + y.len() - 1;
    let eps = 1e-3;
    let mut worst: f64 = 0.0;
    let mut largest: f64 = 0.0;
    let n = 40;
    for _ in 0..n {
        let neuron = NeuronRef::new(rng.random_range(0..2), rng.random_range(0..32));
        let pos = rng.random_range(0..n_pos);
        let f = |e: f64| m.sequence_log_prob(&x, &y, &Nudge { pos, neuron, eps: e }).unwrap().exp();
        let fd = (f(eps) - f(-eps)) / (2.0 * eps);
        let an = grads.per_position[neuron.layer].get(pos, neuron.index);
        worst = worst.max((fd - an).abs());
        largest = largest.max(an.abs());
    }
    check(
        "gradient correctness",
        worst <= 1e-4,
        format!("{n} neurons, max |fd - analytic| {worst:.1e}, largest gradient {largest:.1e}"),
    )
}

fn ig_completeness(model: &TransformerModel<f32>, probes: &[Prompt]) -> Check {
    let q = |w: f64| 2.0 * w;
    let quad = [(2.0, 20usize), (0.7, 256), (-1.3, 7)].iter().all(|&(beta, m)| {
        let got = privneuron::neurons::path_integral(q, beta, m, Quadrature::RightRiemann);
        (got - beta * beta * (m as f64 + 1.0) / m as f64).abs() <= 1e-12
    });

    let cfg = *model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut within = 0;
    let mut worst: f64 = 0.0;
    let n = 100;
    for _ in 0..n {
        let p = &probes[rng.random_range(0..probes.len())];
        let neuron = NeuronRef::new(rng.random_range(0..cfg.n_layers), rng.random_range(0..cfg.d_ff));
        let att = model.attribute_neuron(p, neuron, 256, Quadrature::RightRiemann).unwrap();
        let likelihood = |spec: &InterventionSpec| f64::from(model.sequence_log_prob(&p.q, &p.e, spec).unwrap()).exp();
        let clean = likelihood(&InterventionSpec::new());
        let off = likelihood(&InterventionSpec::zeroing([neuron]).unwrap());
        let err = (att - (clean - off)).abs();
        worst = worst.max(err);
        if err <= 1e-3 {
            within += 1;
        }
    }
    check(
        "integrated-gradient completeness",
        quad && within * 100 >= 95 * n,
        format!("quadratic exact {quad}, {within}/{n} neurons within 1e-3 (worst {worst:.1e})"),
    )
}

fn lens_consistency(model: &TransformerModel<f32>) -> Check {
    let cfg = *model.config();
    let v = cfg.vocab_size as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let hook = InterventionSpec::new();
    let mut exact = 0;
    for i in 0..100 {
        let p = Prompt {
            record_id: i,
            language: "en".into(),
            pii_type: PiiType::Email,
            q: (0..rng.random_range(1..40)).map(|_| rng.random_range(0..v)).collect(),
            e: (0..rng.random_range(1..8)).map(|_| rng.random_range(0..v)).collect(),
        };
        let trace = model.layer_trace(&p, &hook).unwrap();
        let out = model.mrr(&p, &hook).unwrap();
        if trace.layers[cfg.n_layers].value.to_bits() == out.value.to_bits() {
            exact += 1;
        }
    }
    check("logit-lens consistency", exact == 100, format!("{exact}/100 prompts bit-exact"))
}

fn set_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut ok = 0;
    let cases = 1000;
    for _ in 0..cases {
        let n_lang = rng.random_range(2..6);
        let sets: BTreeMap<String, BTreeSet<NeuronRef>> = (0..n_lang)
            .map(|i| {
                let s = (0..rng.random_range(0..30))
                    .map(|_| NeuronRef::new(rng.random_range(0..2), rng.random_range(0..10)))
                    .collect();
                (format!("l{i}"), s)
            })
            .collect();
        let NeuronSets { universal, specific } = partition(&sets).unwrap();
        let all: BTreeSet<NeuronRef> = sets.values().flatten().copied().collect();
        let oracle: BTreeSet<NeuronRef> =
            all.into_iter().filter(|n| sets.values().all(|s| s.contains(n))).collect();
        let holds = universal == oracle
            && sets.iter().all(|(l, p)| {
                let spec = &specific[l];
                universal.is_subset(p)
                    && universal.is_disjoint(spec)
                    && *spec == p.difference(&universal).copied().collect::<BTreeSet<_>>()
            });
        if holds {
            ok += 1;
        }
    }
    check("set algebra", ok == cases, format!("{ok}/{cases} randomized cases"))
}

fn leakage(reports: &[Report]) -> Check {
    let (mut ft, mut shuf) = (Vec::new(), Vec::new());
    let mut langs = BTreeSet::new();
    for r in reports {
        for l in r.transfer_languages() {
            let row = r.leakage(l, None).expect("leakage row");
            ft.push(row.finetuned.unwrap_or(f64::NAN));
            shuf.push(row.shuffled.unwrap_or(f64::NAN));
            langs.insert(l.to_string());
        }
    }
    let (ft, shuf) = (mean(&ft), mean(&shuf));
    check(
        "cross-lingual leakage",
        ft - shuf >= 0.10,
        format!(
            "{} prompts after {}-tuning: MRR {ft:.3} vs shuffled {shuf:.3} (gap {:.3}, {} seeds)",
            langs.into_iter().collect::<Vec<_>>().join("+"),
            reports[0].finetune_language,
            ft - shuf,
            reports.len()
        ),
    )
}

fn information_flow(reports: &[Report]) -> Check {
    let t = mean_traces(reports.iter().map(|r| r.lens.group_traces["all"].as_slice()));
    let l = t.len() - 1;
    let max = t.iter().copied().fold(f64::MIN, f64::max);
    let low_start = t[0] < 0.05;
    let ends_high = t[l] >= 0.9 * max;
    let crossing = t.iter().position(|&v| v > t[l] / 2.0).unwrap_or(l);
    let upper = 2 * crossing > l;
    check(
        "information-flow shape",
        low_start && ends_high && upper,
        format!(
            "high-risk MRR by layer {} ({} seeds): start<0.05 {low_start}, end near max {ends_high}, half crossed at layer {crossing} of {l}",
            fmt_trace(&t),
            reports.len()
        ),
    )
}

fn shared_space(reports: &[Report]) -> Check {
    let mut details = Vec::new();
    let mut pass = true;
    for (i, s) in reports[0].similarity.iter().enumerate() {
        let per_seed: Vec<Vec<f64>> = reports
            .iter()
            .map(|r| r.similarity[i].values.iter().map(|x| x.unwrap_or(f64::NAN)).collect())
            .collect();
        let t = mean_traces(per_seed.iter().map(Vec::as_slice));
        let l = t.len() - 1;
        let argmax = (0..=l).fold(0, |b, k| if t[k] > t[b] { k } else { b });
        pass &= argmax > 0 && argmax < l;
        details.push(format!("{}-{} {} peak at layer {argmax}", s.pair.0, s.pair.1, fmt_trace(&t)));
    }
    check(
        "shared-space similarity",
        pass,
        format!("{} ({} seeds)", details.join("; "), reports.len()),
    )
}

fn mrr_of(r: &Report, strategy: &str, language: &str) -> f64 {
    r.intervention(strategy, language)
        .and_then(|row| row.mrr)
        .unwrap_or_else(|| panic!("no MRR for {strategy}/{language}"))
}

fn causal_efficacy(reports: &[Report]) -> Check {
    let mut wins = 0;
    let mut details = Vec::new();
    for r in reports {
        let randoms: BTreeSet<&str> = r
            .interventions
            .iter()
            .map(|row| row.strategy.as_str())
            .filter(|s| s.starts_with("random-matched"))
            .collect();
        let (mut sel, mut rnd) = (Vec::new(), Vec::new());
        for l in &r.languages {
            let none = mrr_of(r, "none", l);
            sel.push(none - mrr_of(r, "mpnc", l));
            for s in &randoms {
                rnd.push(none - mrr_of(r, s, l));
            }
        }
        let (sel, rnd) = (mean(&sel), mean(&rnd));
        if sel > rnd {
            wins += 1;
        }
        details.push(format!("{:.4}/{:.4}", sel, rnd));
    }
    check(
        "causal efficacy of selected neurons",
        wins >= 4,
        format!("selected beats random in {wins}/{} seeds (drop selected/random: {})", reports.len(), details.join(" ")),
    )
}

fn ordering(r: &Report) -> Vec<&'static str> {
    let mut broken = BTreeSet::new();
    for l in &r.languages {
        let none = mrr_of(r, "none", l);
        let mpnc = mrr_of(r, "mpnc", l);
        let depn = mrr_of(r, "depn", l);
        if !(mpnc < depn && depn <= none) {
            broken.insert("MPNC<DEPN<=orig");
        }
        if mrr_of(r, "universal", l) >= none {
            broken.insert("universal");
        }
        let own = (none - mrr_of(r, "own_specific", l)).abs();
        let other = (none - mrr_of(r, "other_specific", l)).abs();
        if other >= own {
            broken.insert("own>other");
        }
        let ppl = |s: &str| r.intervention(s, l).and_then(|row| row.valid_ppl).unwrap_or(f64::NAN);
        if !(ppl("mpnc") <= 1.25 * ppl("none")) {
            broken.insert("PPL");
        }
    }
    broken.into_iter().collect()
}

fn intervention_ordering(reports: &[Report]) -> Check {
    let mut ok = 0;
    let mut details = Vec::new();
    for r in reports {
        let broken = ordering(r);
        if broken.is_empty() {
            ok += 1;
            details.push(format!("s{} ok", r.seed));
        } else {
            details.push(format!("s{} fails {}", r.seed, broken.join(",")));
        }
    }
    check(
        "intervention ordering",
        ok >= 4,
        format!("{ok}/{} seeds ({})", reports.len(), details.join("; ")),
    )
}

fn report_bytes(cfg: &PipelineConfig) -> Vec<u8> {
    let mut p = Pipeline::new(cfg.clone()).unwrap();
    let dir = p.stage_dir(Stage::Report).unwrap();
    std::fs::read(dir.join("report.json")).unwrap()
}

fn determinism(cfg: &PipelineConfig, first: &Path, second: &Path) -> Check {
    let run = |out: &Path| {
        let cfg = PipelineConfig {
            output_dir: out.to_path_buf(),
            ..cfg.clone()
        };
        Pipeline::new(cfg.clone()).unwrap().run(Stage::Report).unwrap();
        report_bytes(&cfg)
    };
    let a = report_bytes(&PipelineConfig {
        output_dir: first.to_path_buf(),
        ..cfg.clone()
    });
    let b = run(second);
    check(
        "determinism",
        a == b,
        format!("two fresh runs of seed {}: report.json {} bytes, identical {}", cfg.seed, a.len(), a == b),
    )
}

fn main() {
    let start = Instant::now();
    let cfg = match std::env::var_os("PRIVNEURON_ACCEPTANCE_CONFIG") {
        Some(p) => PipelineConfig::load(Path::new(&p)).expect("acceptance config"),
        None => PipelineConfig::default(),
    };
    let tmp = tempfile::tempdir().unwrap();
    let root: PathBuf = std::env::var_os("PRIVNEURON_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| tmp.path().to_path_buf());
    let runs = root.join("runs");
    let rerun = root.join("rerun");
    let _ = std::fs::remove_dir_all(&rerun);

    let mut checks = vec![metric_exactness(), gradient_correctness()];

    let mut reports = Vec::new();
    for seed in 0..SEEDS {
        let seeded = PipelineConfig {
            seed: cfg.seed + seed,
            output_dir: runs.clone(),
            ..cfg.clone()
        };
        let t = Instant::now();
        let outcome = Pipeline::new(seeded.clone()).unwrap().run(Stage::Report).unwrap();
        let report = Pipeline::new(seeded).unwrap().load_report().unwrap();
        eprintln!(
            "seed {}: {} stages ran, {} reused, {:.0?}",
            report.seed,
            outcome.executed.len(),
            outcome.reused.len(),
            t.elapsed()
        );
        reports.push(report);
    }

    let mut first = Pipeline::new(PipelineConfig {
        output_dir: runs.clone(),
        ..cfg.clone()
    })
    .unwrap();
    let model: TransformerModel<f32> = first.load_model(Stage::Finetune).unwrap();
    let (corpus, split) = first.load_corpus().unwrap();
    let probes: Vec<Prompt> = probe_sets(&corpus, &split).unwrap().into_values().flatten().collect();
    checks.push(ig_completeness(&model, &probes));
    checks.push(lens_consistency(&model));
    checks.push(set_algebra());

    let averaged = &reports[..AVERAGED_SEEDS];
    checks.push(leakage(averaged));
    checks.push(information_flow(averaged));
    checks.push(shared_space(averaged));
    checks.push(causal_efficacy(&reports));
    checks.push(intervention_ordering(&reports));
    checks.push(determinism(&cfg, &runs, &rerun));

    let failed = checks.iter().filter(|c| !c.pass).count();
    println!();
    for c in &checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!(
        "{}/{} checks passed in {:.0?}",
        checks.len() - failed,
        checks.len(),
        start.elapsed()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
