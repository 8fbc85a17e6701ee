use std::fs;
use std::path::Path;

use seenet::data_synth::{gen_dataset, generate, generate_sample, load_dataset, SynthConfig};

fn noiseless(m: usize, side: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        saliency_noise: 0.0,
        ..SynthConfig::new(m, side, seed)
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "images", "gt", "saliency"] {
        let d = dir.join(sub);
        let mut names: Vec<_> = fs::read_dir(&d)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for p in names {
            out.push((
                p.strip_prefix(dir).unwrap().display().to_string(),
                fs::read(&p).unwrap(),
            ));
        }
    }
    out
}

#[test]
fn every_class_is_well_represented() {
    let (n, m) = (1000, 6);
    let mut count = vec![0usize; m];
    for s in generate(&SynthConfig::new(m, 32, 7), n).unwrap() {
        for c in s.class_indices() {
            count[c] += 1;
        }
    }
    let floor = n / (4 * m);
    assert!(
        count.iter().all(|&c| c >= floor),
        "class counts {count:?}, floor {floor}"
    );
}

#[test]
fn thresholded_saliency_recovers_the_objects() {
    for s in generate(&noiseless(6, 64, 11), 60).unwrap() {
        let fg = s.gt.foreground();
        let sal: Vec<bool> = s.saliency.values().iter().map(|&v| v >= 0.5).collect();
        let inter = fg.iter().zip(&sal).filter(|(a, b)| **a && **b).count();
        let union = fg.iter().zip(&sal).filter(|(a, b)| **a || **b).count();
        let iou = inter as f64 / union as f64;
        assert!(iou >= 0.9, "{}: saliency IoU {iou}", s.id);
    }
}

#[test]
fn large_objects_occur() {
    let samples = generate(&SynthConfig::new(6, 64, 12), 100).unwrap();
    let largest = samples
        .iter()
        .map(|s| {
            let area = s.gt.labels().len() as f64;
            s.labels
                .iter()
                .map(|&l| s.gt.labels().iter().filter(|&&g| g == l).count() as f64 / area)
                .fold(0.0, f64::max)
        })
        .filter(|&f| f > 0.4)
        .count();
    assert!(
        largest >= 5,
        "only {largest} of 100 samples have an object above 40% of the image"
    );
}

#[test]
fn ground_truth_only_uses_image_labels() {
    for s in generate(&SynthConfig::new(20, 48, 13), 80).unwrap() {
        assert!(!s.labels.is_empty() && s.labels.len() <= 3);
        assert!(s.labels.windows(2).all(|w| w[0] < w[1]));
        let n = s.gt.labels().len();
        for &g in s.gt.labels() {
            assert!(g == 0 || s.labels.contains(&g));
        }
        for &l in &s.labels {
            let c = s.gt.labels().iter().filter(|&&g| g == l).count();
            assert!(c * 100 >= n, "{}: class {l} covers {c} of {n} pixels", s.id);
        }
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn same_seed_writes_identical_trees() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::new(5, 40, 21);
    gen_dataset(12, &cfg, &dir.path().join("a")).unwrap();
    gen_dataset(12, &cfg, &dir.path().join("b")).unwrap();
    assert_eq!(files(&dir.path().join("a")), files(&dir.path().join("b")));
    gen_dataset(12, &SynthConfig::new(5, 40, 22), &dir.path().join("c")).unwrap();
    assert_ne!(files(&dir.path().join("a")), files(&dir.path().join("c")));
}

#[test]
fn written_dataset_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::new(2, 32, 1);
    let manifest = gen_dataset(1, &cfg, dir.path()).unwrap();
    assert_eq!(manifest.samples.len(), 1);
    assert!(!manifest.samples[0].labels.is_empty());
    let ds = load_dataset(dir.path()).unwrap();
    let s = generate_sample(&cfg, 0).unwrap();
    assert_eq!(ds.samples[0].labels, s.labels);
    assert_eq!(ds.samples[0].gt, s.gt);
    for (a, b) in ds.samples[0].image.data().iter().zip(s.image.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn bad_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(gen_dataset(0, &SynthConfig::new(4, 32, 0), dir.path()).is_err());
    assert!(gen_dataset(1, &SynthConfig::new(1, 32, 0), dir.path()).is_err());
    assert!(gen_dataset(1, &SynthConfig::new(21, 32, 0), dir.path()).is_err());
    assert!(gen_dataset(1, &SynthConfig::new(4, 31, 0), dir.path()).is_err());
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    assert!(gen_dataset(1, &SynthConfig::new(4, 32, 0), &blocker.join("sub")).is_err());
}
