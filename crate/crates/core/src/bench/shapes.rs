//! Procedural "scenes" of flat-shaded shapes with aligned segmentation,
//! depth and surface-normal targets.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{LossKind, TaskHead};
use crate::rng::{derive_seed, seeded, Rng};
use crate::tensor::{DType, Tensor};

pub const MIN_IMAGE_SIZE: usize = 16;

/// Heads for the three shapes tasks: segmentation, depth, normals.
pub fn shapes_tasks(num_classes: usize) -> Vec<TaskHead> {
    vec![
        TaskHead {
            loss: LossKind::CrossEntropy,
            channels: num_classes,
        },
        TaskHead {
            loss: LossKind::L1,
            channels: 1,
        },
        TaskHead {
            loss: LossKind::Cosine,
            channels: 3,
        },
    ]
}

#[derive(Clone, Copy)]
enum Kind {
    Disc,
    Square,
    Triangle,
    Diamond,
}

impl Kind {
    fn of_class(class: usize) -> Self {
        [Kind::Disc, Kind::Square, Kind::Triangle, Kind::Diamond][(class - 1) % 4]
    }

    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Kind::Disc => dx * dx + dy * dy <= r * r,
            Kind::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Kind::Triangle => dy >= -r && dy <= r && dx.abs() <= 0.6 * (dy + r),
            Kind::Diamond => dx.abs() + dy.abs() <= r,
        }
    }
}

/// Base colour of a class, spread around the hue circle.
fn palette(class: usize, classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.45, 0.45, 0.45];
    }
    let h = (class - 1) as f64 / (classes - 1) as f64 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.7 * r, 0.15 + 0.7 * g, 0.15 + 0.7 * b]
}

/// Unit normals of a depth map; slopes are measured per image width so the
/// normals do not depend on resolution.
pub fn normals_from_depth(depth: &[f64], size: usize) -> Vec<[f64; 3]> {
    let at = |y: usize, x: usize| depth[y * size + x];
    let mut out = Vec::with_capacity(size * size);
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(size - 1));
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(size - 1));
            let dzdx = (at(y, x1) - at(y, x0)) / (x1 - x0) as f64 * s;
            let dzdy = (at(y1, x) - at(y0, x)) / (y1 - y0) as f64 * s;
            let (nx, ny, nz) = (-dzdx, -dzdy, 1.0);
            let norm = (nx * nx + ny * ny + nz * nz).sqrt();
            out.push([nx / norm, ny / norm, nz / norm]);
        }
    }
    out
}

struct Scene {
    image: Vec<f64>,
    classes: Vec<f64>,
    depth: Vec<f64>,
    normals: Vec<[f64; 3]>,
}

fn render(size: usize, num_classes: usize, rng: &mut Rng) -> Scene {
    let s = size as f64;
    let npix = size * size;
    let tilt = rng.random_range(0.2..0.6);
    let mut depth: Vec<f64> = (0..npix).map(|i| 1.2 + tilt * ((i / size) as f64 / s - 0.5)).collect();
    let mut classes = vec![0usize; npix];
    let bg_tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.1..0.1));
    let mut albedo: Vec<[f64; 3]> = (0..npix).map(|_| {
        let p = palette(0, num_classes);
        [p[0] + bg_tint[0], p[1] + bg_tint[1], p[2] + bg_tint[2]]
    }).collect();

    let shapes = rng.random_range(1..=3);
    for _ in 0..shapes {
        let class = rng.random_range(1..num_classes);
        let kind = Kind::of_class(class);
        let (cx, cy) = (rng.random_range(0.15..0.85) * s, rng.random_range(0.15..0.85) * s);
        let r = rng.random_range(0.1..0.22) * s;
        let d0 = rng.random_range(0.35..0.95);
        let (gx, gy) = (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
        let base = palette(class, num_classes);
        let colour: [f64; 3] = std::array::from_fn(|c| (base[c] + rng.random_range(-0.12..0.12)).clamp(0.0, 1.0));
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if !kind.contains(dx, dy, r) {
                    continue;
                }
                let z = d0 + (gx * dx + gy * dy) / s;
                let i = y * size + x;
                if z < depth[i] {
                    depth[i] = z;
                    classes[i] = class;
                    albedo[i] = colour;
                }
            }
        }
    }

    let normals = normals_from_depth(&depth, size);
    let noise = Normal::new(0.0, 0.03).expect("valid deviation");
    let mut image = vec![0.0; 3 * npix];
    for i in 0..npix {
        let shade = (0.55 + 0.45 * normals[i][2]) * (1.35 - 0.5 * depth[i]);
        for c in 0..3 {
            image[c * npix + i] = albedo[i][c] * shade + noise.sample(rng) - 0.5;
        }
    }
    Scene {
        image,
        classes: classes.into_iter().map(|c| c as f64).collect(),
        depth,
        normals,
    }
}

/// `n` scenes of `image_size`² pixels: input `[n, 3, S, S]`; targets class
/// map `[n, S, S]`, depth `[n, 1, S, S]`, unit normals `[n, 3, S, S]`.
/// Class 0 is background.
pub fn gen_shapes_dataset(
    n: usize,
    image_size: usize,
    num_classes: usize,
    seed: u64,
    dtype: DType,
) -> Result<Dataset> {
    if image_size < MIN_IMAGE_SIZE {
        return Err(Error::Argument(format!(
            "image_size must be ≥ {MIN_IMAGE_SIZE}, got {image_size}"
        )));
    }
    if num_classes < 2 {
        return Err(Error::Argument(format!("num_classes must be ≥ 2, got {num_classes}")));
    }
    if n == 0 {
        return Err(Error::Argument("a dataset needs at least one sample".into()));
    }
    let npix = image_size * image_size;
    let mut images = Vec::with_capacity(n * 3 * npix);
    let mut seg = Vec::with_capacity(n * npix);
    let mut depth = Vec::with_capacity(n * npix);
    let mut normals = Vec::with_capacity(n * 3 * npix);
    for i in 0..n {
        let mut rng = seeded(derive_seed(seed, i as u64));
        let scene = render(image_size, num_classes, &mut rng);
        images.extend(scene.image);
        seg.extend(scene.classes);
        depth.extend(scene.depth);
        for c in 0..3 {
            normals.extend(scene.normals.iter().map(|v| v[c]));
        }
    }
    let s = image_size;
    let make = |shape: &[usize], v: Vec<f64>| Tensor::from_f64(shape, v).map(|t| t.cast(dtype));
    Dataset::new(
        make(&[n, 3, s, s], images)?,
        vec![
            make(&[n, s, s], seg)?,
            make(&[n, 1, s, s], depth)?,
            make(&[n, 3, s, s], normals)?,
        ],
    )
}

/// Disjoint train and validation sets drawn from the same generator.
pub fn gen_shapes_split(
    train: usize,
    val: usize,
    image_size: usize,
    num_classes: usize,
    seed: u64,
    dtype: DType,
) -> Result<(Dataset, Dataset)> {
    Ok((
        gen_shapes_dataset(train, image_size, num_classes, derive_seed(seed, 1), dtype)?,
        gen_shapes_dataset(val, image_size, num_classes, derive_seed(seed, 2), dtype)?,
    ))
}
