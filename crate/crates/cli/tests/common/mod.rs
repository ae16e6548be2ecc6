#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mcdrop::seed::rng_for;
use mcdrop::synth::{InstanceSpec, SceneSpec, Shape};
use rand::Rng;

pub const WIDTH: u32 = 640;
pub const HEIGHT: u32 = 480;
pub const NUM_CLASSES: usize = 5;

fn instance(center: (f64, f64), size: (f64, f64), sigma: f64, class: usize, shape: Shape) -> InstanceSpec {
    let (cx, cy) = center;
    let (w, h) = size;
    InstanceSpec {
        true_box: [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0],
        true_class: class,
        shape,
        box_jitter_sigma: sigma,
        class_confusion: 0.2,
        mask_noise: 0.05,
        miss_rate: 0.0,
    }
}

fn base(seed: u64, instances: Vec<InstanceSpec>) -> SceneSpec {
    SceneSpec {
        image_id: format!("scene-{seed}"),
        height: HEIGHT,
        width: WIDTH,
        num_classes: NUM_CLASSES,
        n_repetitions: 100,
        seed,
        instances,
    }
}

/// `k` instances with one shared jitter sigma in [1, 4) px and box centers
/// at least `min_sep * sigma` apart.
pub fn separated_scene(seed: u64, k: usize, min_sep: f64) -> SceneSpec {
    let mut rng = rng_for(seed, 0xACCE);
    let sigma = rng.random_range(1.0..4.0);
    let mut instances: Vec<InstanceSpec> = Vec::new();
    let mut centers: Vec<(f64, f64)> = Vec::new();
    while instances.len() < k {
        let size = (rng.random_range(30.0..120.0), rng.random_range(30.0..120.0));
        let margin = 4.0 * sigma + 2.0;
        let cx = rng.random_range(size.0 / 2.0 + margin..WIDTH as f64 - size.0 / 2.0 - margin);
        let cy = rng.random_range(size.1 / 2.0 + margin..HEIGHT as f64 - size.1 / 2.0 - margin);
        if centers
            .iter()
            .all(|&(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() >= min_sep * sigma)
        {
            centers.push((cx, cy));
            let shape = if rng.random::<bool>() { Shape::Rect } else { Shape::Ellipse };
            instances.push(instance((cx, cy), size, sigma, rng.random_range(1..=NUM_CLASSES), shape));
        }
    }
    base(seed, instances)
}

/// Two same-size instances whose boxes differ by a translation of
/// `sep * sigma` px in a random direction.
pub fn overlapping_pair(seed: u64, sep: f64) -> SceneSpec {
    let mut rng = rng_for(seed, 0xC0DE);
    let sigma = rng.random_range(1.0..4.0);
    let size = (rng.random_range(40.0..120.0), rng.random_range(40.0..120.0));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let d = sep * sigma;
    let c1 = (WIDTH as f64 / 2.0, HEIGHT as f64 / 2.0);
    let c2 = (c1.0 + d * angle.cos(), c1.1 + d * angle.sin());
    let classes = (rng.random_range(1..=NUM_CLASSES), rng.random_range(1..=NUM_CLASSES));
    base(
        seed,
        vec![
            instance(c1, size, sigma, classes.0, Shape::Rect),
            instance(c2, size, sigma, classes.1, Shape::Rect),
        ],
    )
}

pub fn write_spec(dir: &Path, name: &str, spec: &SceneSpec) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(spec).unwrap()).unwrap();
    p
}

/// Relative path -> contents of every file under `root`.
pub fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
