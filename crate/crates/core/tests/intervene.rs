use std::collections::{BTreeMap, BTreeSet};

use privneuron::corpus::{PiiType, Prompt};
use privneuron::intervene::{evaluate, make_spec, mean_activations, EditInputs, PromptSets, Strategy};
use privneuron::metrics::mean;
use privneuron::neurons::{LanguageSelection, NeuronSets};
use privneuron::nn::{Action, InterventionSpec, ModelConfig, NeuronRef, TransformerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> TransformerModel<f64> {
    TransformerModel::new(ModelConfig {
        n_layers: 2,
        d_model: 16,
        d_ff: 24,
        n_heads: 2,
        vocab_size: 19,
        context_len: 32,
        seed: 6,
        tie_embeddings: true,
    })
    .unwrap()
}

fn n(layer: usize, index: usize) -> NeuronRef {
    NeuronRef::new(layer, index)
}

fn sets() -> NeuronSets {
    NeuronSets {
        universal: BTreeSet::from([n(0, 1), n(1, 5)]),
        specific: BTreeMap::from([
            ("en".to_string(), BTreeSet::from([n(0, 2), n(1, 9)])),
            ("zh".to_string(), BTreeSet::from([n(1, 3)])),
            ("ja".to_string(), BTreeSet::from([n(0, 7), n(1, 9)])),
        ]),
    }
}

fn selection(language: &str, freq: &[(NeuronRef, u32)]) -> LanguageSelection {
    let mut frequencies = vec![0; 48];
    for &(r, f) in freq {
        frequencies[r.flat(24)] = f;
    }
    LanguageSelection {
        language: language.into(),
        dataset_size: 10,
        frequencies,
        attribution_sum: vec![0.0; 48],
        selected: freq.iter().map(|&(r, _)| r).collect(),
    }
}

fn prompt_sets(langs: &[&str]) -> PromptSets {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut out = PromptSets::new();
    for l in langs {
        for pii in PiiType::ALL {
            let ps = (0..4)
                .map(|id| Prompt {
                    record_id: id,
                    language: l.to_string(),
                    pii_type: pii,
                    q: (0..rng.random_range(2..10)).map(|_| rng.random_range(0..19)).collect(),
                    e: (0..rng.random_range(1..4)).map(|_| rng.random_range(0..19)).collect(),
                })
                .collect();
            out.insert((l.to_string(), pii), ps);
        }
    }
    out
}

#[test]
fn strategies_resolve_against_the_probe_language() {
    let cfg = *model().config();
    let sets = sets();
    let selections = BTreeMap::new();
    let reference = BTreeSet::from([n(0, 0), n(0, 2)]);
    let inputs = EditInputs {
        sets: &sets,
        selections: &selections,
        reference: &reference,
        mean_activations: None,
    };
    let zeroed = |s: &Strategy, l: &str| -> BTreeSet<NeuronRef> {
        make_spec(s, l, &inputs, &cfg).unwrap().neurons().collect()
    };
    assert!(zeroed(&Strategy::None, "en").is_empty());
    assert_eq!(
        zeroed(&Strategy::Mpnc { budget: None }, "en"),
        BTreeSet::from([n(0, 1), n(1, 5), n(0, 2), n(1, 9)])
    );
    assert_eq!(zeroed(&Strategy::Mpnc { budget: None }, "zh"), BTreeSet::from([n(0, 1), n(1, 5), n(1, 3)]));
    assert_eq!(zeroed(&Strategy::Universal, "ja"), sets.universal);
    assert_eq!(zeroed(&Strategy::OwnSpecific, "zh"), BTreeSet::from([n(1, 3)]));
    assert_eq!(
        zeroed(&Strategy::OtherSpecific, "zh"),
        BTreeSet::from([n(0, 2), n(1, 9), n(0, 7)])
    );
    assert_eq!(zeroed(&Strategy::Depn, "zh"), reference);
    assert_eq!(zeroed(&Strategy::Depn, "en"), reference);
    let random = zeroed(&Strategy::Random { budget: None, seed: 4 }, "en");
    assert_eq!(random.len(), 4);
    assert_eq!(random, zeroed(&Strategy::Random { budget: None, seed: 4 }, "en"));
    assert!(make_spec(&Strategy::OwnSpecific, "fr", &inputs, &cfg).is_err());
    assert!(make_spec(&Strategy::Random { budget: Some(49), seed: 0 }, "en", &inputs, &cfg).is_err());
    assert!(make_spec(&Strategy::ApneapLike, "en", &inputs, &cfg).is_err());
}

#[test]
fn budgeted_mpnc_keeps_the_most_frequent_neurons() {
    let cfg = *model().config();
    let sets = sets();
    // n(0, 4) is selected but outside the MPNC set, so it is skipped.
    let selections = BTreeMap::from([(
        "en".to_string(),
        selection("en", &[(n(0, 1), 3), (n(1, 5), 9), (n(0, 2), 7), (n(1, 9), 5), (n(0, 4), 10)]),
    )]);
    let reference = BTreeSet::new();
    let inputs = EditInputs {
        sets: &sets,
        selections: &selections,
        reference: &reference,
        mean_activations: None,
    };
    let spec = make_spec(&Strategy::Mpnc { budget: Some(2) }, "en", &inputs, &cfg).unwrap();
    assert_eq!(spec.neurons().collect::<BTreeSet<_>>(), BTreeSet::from([n(1, 5), n(0, 2)]));
    let all = make_spec(&Strategy::Mpnc { budget: Some(100) }, "en", &inputs, &cfg).unwrap();
    assert_eq!(all.len(), 4);
}

#[test]
fn patching_uses_mean_clean_activations() {
    let m = model();
    let cfg = *m.config();
    let texts: Vec<Vec<u32>> = vec![vec![1, 2, 3], vec![4, 5, 6, 7, 8], vec![9]];
    let means = mean_activations(&m, &texts).unwrap();
    // Oracle: average the recorded activations directly.
    let hook = InterventionSpec::new();
    let mut direct = vec![0.0; cfg.neuron_count()];
    let mut count = 0.0;
    for t in &texts {
        let trace = m.forward(t, &hook).unwrap().trace;
        for p in 0..t.len() {
            for l in 0..cfg.n_layers {
                for k in 0..cfg.d_ff {
                    direct[l * cfg.d_ff + k] += trace.ffn_acts[l].get(p, k);
                }
            }
            count += 1.0;
        }
    }
    for (a, b) in means.iter().zip(&direct) {
        assert!((a - b / count).abs() < 1e-12);
    }

    let sets = sets();
    let selections = BTreeMap::new();
    let reference = BTreeSet::from([n(0, 3), n(1, 8)]);
    let inputs = EditInputs {
        sets: &sets,
        selections: &selections,
        reference: &reference,
        mean_activations: Some(&means),
    };
    let spec = make_spec(&Strategy::ApneapLike, "en", &inputs, &cfg).unwrap();
    assert_eq!(spec.get(&n(0, 3)), Some(Action::Patch(means[3])));
    assert_eq!(spec.get(&n(1, 8)), Some(Action::Patch(means[24 + 8])));
    assert!(mean_activations(&m, &[]).is_err());
}

#[test]
fn evaluation_without_edits_matches_the_clean_model() {
    let m = model();
    let prompts = prompt_sets(&["en", "zh"]);
    let valid: Vec<Vec<u32>> = vec![vec![1, 2, 3, 4], vec![5, 6, 7]];
    let sets = sets();
    let selections = BTreeMap::new();
    let reference = BTreeSet::from([n(0, 0)]);
    let inputs = EditInputs {
        sets: &sets,
        selections: &selections,
        reference: &reference,
        mean_activations: None,
    };
    let strategies = [Strategy::None, Strategy::Mpnc { budget: None }, Strategy::Depn];
    let report = evaluate(&m, &strategies, &prompts, &valid, &inputs).unwrap();
    assert_eq!(report.mrr.len(), 3 * 2 * 3);
    assert_eq!(report.ppl.len(), 3 * 2);
    let hook = InterventionSpec::new();
    for l in ["en", "zh"] {
        let per_type: Vec<f64> = PiiType::ALL
            .iter()
            .map(|&pii| {
                let v: Vec<f64> = prompts[&(l.to_string(), pii)]
                    .iter()
                    .map(|p| m.mrr(p, &hook).unwrap().value)
                    .collect();
                mean(&v)
            })
            .collect();
        assert_eq!(report.language_mrr("none", l).unwrap(), mean(&per_type));
        assert_eq!(report.valid_ppl("none", l).unwrap(), m.valid_ppl(&valid, &hook).unwrap().value);
        let mpnc = InterventionSpec::zeroing(sets.language_set(l).unwrap()).unwrap();
        assert_eq!(report.valid_ppl("mpnc", l).unwrap(), m.valid_ppl(&valid, &mpnc).unwrap().value);
    }
    // DEPN is language-unaware: same PPL for every probe language.
    assert_eq!(report.valid_ppl("depn", "en"), report.valid_ppl("depn", "zh"));

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("mrr.csv"), dir.path().join("ppl.csv"));
    report.write_csv(&a, &b).unwrap();
    assert!(std::fs::read_to_string(&a).unwrap().starts_with("strategy,language,pii_type,mrr,prompts\n"));
    assert!(std::fs::read_to_string(&b).unwrap().starts_with("strategy,language,valid_ppl,neurons\n"));
}

#[test]
fn strategies_parse_from_toml() {
    #[derive(serde::Deserialize)]
    struct List {
        s: Vec<Strategy>,
    }
    let text = r#"
        s = [
            { kind = "none" },
            { kind = "mpnc" },
            { kind = "mpnc", budget = 8 },
            { kind = "random", seed = 3 },
            { kind = "other_specific" },
        ]
    "#;
    let list: List = toml::from_str(text).unwrap();
    let labels: Vec<String> = list.s.iter().map(Strategy::label).collect();
    assert_eq!(labels, ["none", "mpnc", "mpnc-8", "random-matched-s3", "other_specific"]);
    assert!(toml::from_str::<List>(r#"s = [{ kind = "mpnc", budgt = 3 }]"#).is_err());
}
