#![allow(dead_code)]

use std::fs;
use std::path::Path;

use ldct_bench::dataset::{Dataset, Split};
use ldct_bench::metrics::Prediction;
use ldct_bench::synthetic::{write_corpus, CorpusSpec, PhantomParams};

/// Strong lesions, 64×64, 40 patients × 5 slices.
pub fn separable_corpus(dir: &Path) -> Dataset {
    write_corpus(
        dir,
        &CorpusSpec {
            n_patients: 40,
            slices_per_patient: 5,
            prevalence: 0.4,
            width: 64,
            height: 64,
            phantom: PhantomParams {
                lesion_contrast: 0.4,
                lesion_radius_frac: 0.14,
            },
            split_fracs: (0.6, 0.1),
            seed: 11,
        },
    )
    .unwrap()
}

pub fn small_corpus(dir: &Path, n_patients: usize, slices: usize) -> Dataset {
    write_corpus(
        dir,
        &CorpusSpec {
            n_patients,
            slices_per_patient: slices,
            prevalence: 0.3,
            width: 32,
            height: 32,
            phantom: PhantomParams::default(),
            split_fracs: (0.6, 0.1),
            seed: 5,
        },
    )
    .unwrap()
}

/// Score file with `score_of(label, index)` for every test id.
pub fn write_score_file(path: &Path, ds: &Dataset, score_of: impl Fn(u8, usize) -> f64) {
    let mut text = String::from("id,score\n");
    for (i, r) in ds.split(Split::Test).enumerate() {
        text.push_str(&format!("{},{}\n", r.id, score_of(r.label, i)));
    }
    fs::write(path, text).unwrap();
}

pub fn test_predictions(ds: &Dataset, score_of: impl Fn(u8, usize) -> f64) -> Vec<Prediction> {
    ds.split(Split::Test)
        .enumerate()
        .map(|(i, r)| Prediction::new(r.id.clone(), score_of(r.label, i), r.label).unwrap())
        .collect()
}

/// Every file under `root`, relative path and bytes, sorted by path.
pub fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
