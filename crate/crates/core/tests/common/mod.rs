//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use spoofcue::classifier::ClassifierConfig;
use spoofcue::config::ExperimentConfig;
use spoofcue::datamodel::{AttackType, DatasetManifest, EvalProtocol, Label, Split};
use spoofcue::generator::GeneratorConfig;
use spoofcue::pipeline::{synth_dataset, ArtifactKind, SynthConfig};
use spoofcue::scoring::ScoreRecord;

pub fn record(score: f64, pai: &str, id: usize) -> ScoreRecord {
    let live = pai == "live";
    ScoreRecord {
        sample_id: format!("r{id}"),
        score,
        label: if live { Label::Live } else { Label::Spoof },
        attack_type: if live {
            AttackType::live()
        } else {
            AttackType::new(pai).unwrap()
        },
    }
}

/// Rates counted one record at a time.
pub struct CountedRates {
    pub apcer_per_pai: BTreeMap<String, f64>,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub hter: f64,
}

pub fn count_rates(records: &[ScoreRecord], threshold: f64) -> CountedRates {
    let mut live_total = 0usize;
    let mut live_flagged = 0usize;
    let mut attacks: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in records {
        let says_spoof = !(r.score < threshold);
        if r.attack_type.as_str() == "live" {
            live_total += 1;
            if says_spoof {
                live_flagged += 1;
            }
        } else {
            let e = attacks.entry(r.attack_type.as_str().to_string()).or_insert((0, 0));
            e.0 += 1;
            if !says_spoof {
                e.1 += 1;
            }
        }
    }
    let apcer_per_pai: BTreeMap<String, f64> = attacks
        .iter()
        .map(|(k, (n, missed))| (k.clone(), *missed as f64 / *n as f64))
        .collect();
    let mut apcer = 0.0f64;
    for v in apcer_per_pai.values() {
        if *v > apcer {
            apcer = *v;
        }
    }
    let bpcer = live_flagged as f64 / live_total as f64;
    let spoof_total: usize = attacks.values().map(|(n, _)| n).sum();
    let spoof_missed: usize = attacks.values().map(|(_, m)| m).sum();
    let far = spoof_missed as f64 / spoof_total as f64;
    CountedRates {
        apcer_per_pai,
        apcer,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
        hter: (bpcer + far) / 2.0,
    }
}

/// Random record list with at least one live sample and at least two
/// instruments. Scores are drawn from a coarse grid so ties with the
/// threshold occur.
pub fn random_records(rng: &mut impl Rng, max_len: usize) -> (Vec<ScoreRecord>, f64) {
    let pais = ["print", "replay", "mask", "cut"];
    let len = rng.random_range(3..=max_len);
    let n_pai = rng.random_range(2..=pais.len());
    let grid = |rng: &mut dyn rand::RngCore| (rng.random_range(0..=20) as f64) * 0.05;
    let mut recs = vec![record(grid(rng), "live", 0)];
    for (k, p) in pais.iter().take(n_pai).enumerate() {
        recs.push(record(grid(rng), p, k + 1));
    }
    while recs.len() < len {
        let id = recs.len();
        let r = if rng.random_bool(0.5) {
            record(grid(rng), "live", id)
        } else {
            record(grid(rng), pais[rng.random_range(0..n_pai)], id)
        };
        recs.push(r);
    }
    let threshold = grid(rng);
    (recs, threshold)
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = (v.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Every `(a, p, n)` with live `a != p`, spoof `n` and a positive hinge.
pub fn enumerate_triplets(
    labels: &[Label],
    d: &[Vec<f64>],
    margin: f64,
) -> BTreeSet<(usize, usize, usize)> {
    let b = labels.len();
    let mut out = BTreeSet::new();
    for a in 0..b {
        for p in 0..b {
            for n in 0..b {
                let valid = labels[a] == Label::Live
                    && labels[p] == Label::Live
                    && a != p
                    && labels[n] == Label::Spoof;
                if valid && d[a][p] - d[a][n] + margin > 0.0 {
                    out.insert((a, p, n));
                }
            }
        }
    }
    out
}

/// `||a - n|| / max(||a||, ||n||)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn tiny_generator(input: usize) -> GeneratorConfig {
    GeneratorConfig {
        input_size: input,
        encoder_widths: [4, 4, 8, 8, 8],
        decoder_widths: [8, 8, 4, 4, 4],
        ..Default::default()
    }
}

pub fn tiny_classifier() -> ClassifierConfig {
    ClassifierConfig {
        backbone_widths: [4, 8, 8, 8],
        ..Default::default()
    }
}

/// Small end-to-end configuration for fast training tests.
pub fn tiny_experiment(size: usize, dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        generator: tiny_generator(size),
        classifier: tiny_classifier(),
        ..Default::default()
    };
    cfg.pipeline.patch_size = size;
    cfg.train.batch_size = 8;
    cfg.train.epochs = 2;
    cfg.train.checkpoint_dir = dir.to_path_buf();
    cfg
}

pub fn tiny_dataset(root: &Path, count: usize, size: usize, seed: u64) -> DatasetManifest {
    synth_dataset(
        &SynthConfig {
            count,
            image_size: size,
            artifact_types: vec![ArtifactKind::Moire, ArtifactKind::ColorCast],
            artifact_strength: 1.0,
            seed,
            split_fractions: [0.6, 0.2, 0.2],
        },
        root,
    )
    .unwrap()
}

/// Train 400 live / 400 spoof (moire, color_cast), dev 50 / 50, test
/// 100 live / 100 spoof where half the test spoofs carry the withheld
/// banding artifact.
pub fn open_set_dataset(root: &Path, seed: u64) -> (DatasetManifest, EvalProtocol) {
    let seen = synth_dataset(
        &SynthConfig {
            count: 550,
            image_size: 96,
            artifact_types: vec![ArtifactKind::Moire, ArtifactKind::ColorCast],
            artifact_strength: 1.0,
            seed,
            split_fractions: [400.0 / 550.0, 50.0 / 550.0, 100.0 / 550.0],
        },
        root.join("seen"),
    )
    .unwrap();
    let unseen = synth_dataset(
        &SynthConfig {
            count: 50,
            image_size: 96,
            artifact_types: vec![ArtifactKind::Banding],
            artifact_strength: 1.0,
            seed: seed.wrapping_add(0x5eed),
            split_fractions: [0.0, 0.0, 1.0],
        },
        root.join("unseen"),
    )
    .unwrap();
    let mut seen_test_spoofs = 0;
    let seen_samples: Vec<_> = seen
        .samples
        .into_iter()
        .filter(|s| {
            if s.label.is_spoof() && s.split == Split::Test {
                seen_test_spoofs += 1;
                seen_test_spoofs <= 50
            } else {
                true
            }
        })
        .collect();
    let unseen_spoof: Vec<_> = unseen
        .samples
        .into_iter()
        .filter(|s| s.label.is_spoof())
        .collect();
    let seen = DatasetManifest::new(root.join("seen"), seen_samples).unwrap();
    let unseen = DatasetManifest::new(root.join("unseen"), unseen_spoof).unwrap();
    let manifest = DatasetManifest::merge(root, &[seen, unseen]).unwrap();
    let protocol = EvalProtocol {
        name: "open-set".into(),
        ..Default::default()
    }
    .with_unseen([ArtifactKind::Banding.attack_type()]);
    (manifest, protocol)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
