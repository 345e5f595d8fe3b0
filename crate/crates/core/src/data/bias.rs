use rand::seq::SliceRandom;
use rand::Rng;

use super::{apportion, generate_glyph_dataset, BiasMode, BiasSpec, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub type Rgb = [f64; 3];

const PALETTE: [Rgb; 10] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.1, 0.3, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.6, 0.2, 1.0],
    [0.6, 1.0, 0.4],
    [1.0, 1.0, 1.0],
];

/// The first `n` colours of a fixed ten-colour palette.
pub fn default_palette(n: usize) -> Result<Vec<Rgb>> {
    if n == 0 || n > PALETTE.len() {
        return Err(Error::Config(format!(
            "default palette has {} colours, {n} requested",
            PALETTE.len()
        )));
    }
    Ok(PALETTE[..n].to_vec())
}

fn check_palette(palette: &[Rgb], groups: usize) -> Result<()> {
    if palette.len() != groups {
        return Err(Error::Config(format!(
            "palette has {} colours for {groups} groups",
            palette.len()
        )));
    }
    for (i, a) in palette.iter().enumerate() {
        if a.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config(format!("palette colour {i} outside [0, 1]")));
        }
        if palette[..i].contains(a) {
            return Err(Error::Config(format!("palette colour {i} is a duplicate")));
        }
    }
    Ok(())
}

/// Paints a single grayscale intensity map with `color`.
fn paint(intensity: &[f64], color: Rgb, mode: BiasMode, out: &mut Vec<f64>) {
    for c in color {
        out.extend(intensity.iter().map(|&v| match mode {
            BiasMode::Background => v + (1.0 - v) * c,
            _ => v * c,
        }));
    }
}

/// Assigns groups per class by apportioning `weights(class)` over a seeded
/// shuffle of the class's examples, then paints each example.
fn paint_by_weights(
    ds: &LabeledDataset,
    palette: &[Rgb],
    mode: BiasMode,
    seed: u64,
    weights: impl Fn(usize) -> Vec<f64>,
) -> Result<LabeledDataset> {
    let [c, h, w] = ds.image_shape();
    if c != 1 {
        return Err(Error::Dataset(format!("colour bias needs grayscale input, got {c} channels")));
    }
    let mut rng = rng::stream(seed, rng::COLOR);
    let mut group = vec![0usize; ds.len()];
    for class in 0..ds.num_classes() {
        let mut idx = ds.class_indices(class);
        idx.shuffle(&mut rng);
        let counts = apportion(idx.len(), &weights(class));
        let mut cursor = 0;
        for (a, &count) in counts.iter().enumerate() {
            for &i in &idx[cursor..cursor + count] {
                group[i] = a;
            }
            cursor += count;
        }
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(ds.len() * 3 * plane);
    for (i, &a) in group.iter().enumerate() {
        paint(&ds.images().data()[i * plane..(i + 1) * plane], palette[a], mode, &mut data);
    }
    let images = Tensor::new(vec![ds.len(), 3, h, w], data)?;
    ds.with_images(images, group, palette.len())
}

/// Paints a fraction `br` of every class with its majority colour
/// (`class mod |A|`) and distributes the rest over the other colours, evenly
/// or per `spec.minority_weights`. The group label becomes the palette index.
pub fn apply_color_bias(
    ds: &LabeledDataset,
    spec: &BiasSpec,
    palette: &[Rgb],
    seed: u64,
) -> Result<LabeledDataset> {
    spec.validate_loose()?;
    check_palette(palette, spec.num_groups)?;
    if spec.mode == BiasMode::Grayscale {
        return Err(Error::Config("apply_color_bias needs fg or bg mode".into()));
    }
    paint_by_weights(ds, palette, spec.mode, seed, |class| {
        spec.group_weights(class % spec.num_groups)
    })
}

/// Paints every example's glyph with a uniformly drawn palette colour; the
/// group label records the colour.
pub fn colorize_uniform(ds: &LabeledDataset, palette: &[Rgb], seed: u64) -> Result<LabeledDataset> {
    let [c, h, w] = ds.image_shape();
    if c != 1 {
        return Err(Error::Dataset(format!("colourize needs grayscale input, got {c} channels")));
    }
    check_palette(palette, palette.len())?;
    let mut rng = rng::stream(seed, rng::TEST_COLORS);
    let plane = h * w;
    let mut data = Vec::with_capacity(ds.len() * 3 * plane);
    let mut group = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let a = rng.gen_range(0..palette.len());
        paint(&ds.images().data()[i * plane..(i + 1) * plane], palette[a], BiasMode::Foreground, &mut data);
        group.push(a);
    }
    let images = Tensor::new(vec![ds.len(), 3, h, w], data)?;
    ds.with_images(images, group, palette.len())
}

/// Replaces every channel of a `[3, H, W]` image with its luminance
/// `0.299 R + 0.587 G + 0.114 B`.
pub fn grayscale_image(pixels: &[f64]) -> Vec<f64> {
    let plane = pixels.len() / 3;
    let lum: Vec<f64> = (0..plane)
        .map(|i| {
            let (r, g, b) = (pixels[i], pixels[plane + i], pixels[2 * plane + i]);
            if r == g && g == b {
                r
            } else {
                (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0)
            }
        })
        .collect();
    let mut out = Vec::with_capacity(pixels.len());
    for _ in 0..3 {
        out.extend_from_slice(&lum);
    }
    out
}

fn grayscale_rows(ds: &LabeledDataset, which: &[bool]) -> Result<Tensor> {
    let [_, h, w] = ds.image_shape();
    let len = 3 * h * w;
    let mut data = ds.images().data().to_vec();
    for (i, &gray) in which.iter().enumerate() {
        if gray {
            let g = grayscale_image(&data[i * len..(i + 1) * len]);
            data[i * len..(i + 1) * len].copy_from_slice(&g);
        }
    }
    Ok(Tensor::new(ds.images().shape().to_vec(), data)?)
}

/// Grayscales a class-dependent share of a colour dataset. In the first half
/// of the classes the grayscale group is the majority (share `br`), in the
/// second half the colour group is. Group 0 = colour, 1 = grayscale.
pub fn apply_grayscale_bias(ds: &LabeledDataset, br: f64, seed: u64) -> Result<LabeledDataset> {
    if ds.image_shape()[0] != 3 {
        return Err(Error::Dataset(format!(
            "grayscale bias needs 3-channel input, got {}",
            ds.image_shape()[0]
        )));
    }
    if !(0.5..=1.0).contains(&br) {
        return Err(Error::Config(format!("br {br} outside [1/2, 1]")));
    }
    let mut rng = rng::stream(seed, rng::GRAYSCALE);
    let half = ds.num_classes() / 2;
    let mut group = vec![0usize; ds.len()];
    for class in 0..ds.num_classes() {
        let mut idx = ds.class_indices(class);
        idx.shuffle(&mut rng);
        let majority = if class < half { 1 } else { 0 };
        let mut weights = [1.0 - br; 2];
        weights[majority] = br;
        let counts = apportion(idx.len(), &weights);
        for &i in &idx[..counts[0]] {
            group[i] = 0;
        }
        for &i in &idx[counts[0]..] {
            group[i] = 1;
        }
    }
    let which: Vec<bool> = group.iter().map(|&a| a == 1).collect();
    let images = grayscale_rows(ds, &which)?;
    ds.with_images(images, group, 2)
}

/// Glyphs plus the bias described by `spec`.
pub fn build_training_set(spec: &BiasSpec, palette: &[Rgb], seed: u64) -> Result<LabeledDataset> {
    spec.validate_loose()?;
    let glyphs = generate_glyph_dataset(spec, seed)?;
    match spec.mode {
        BiasMode::Foreground | BiasMode::Background => apply_color_bias(&glyphs, spec, palette, seed),
        BiasMode::Grayscale => {
            let colored = colorize_uniform(&glyphs, palette, seed)?;
            apply_grayscale_bias(&colored, spec.br, seed)
        }
    }
}

fn test_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x7E57)
}

/// A test set with exactly equal group counts in every class.
///
/// Colour modes paint `per_class_count / |A|` examples per colour and class;
/// grayscale mode keeps every colour image and adds a grayscale copy. The
/// glyph jitter is drawn from a stream derived from, but distinct from, `seed`.
pub fn build_balanced_test(spec: &BiasSpec, palette: &[Rgb], seed: u64) -> Result<LabeledDataset> {
    let mut test_spec = spec.clone();
    test_spec.minority_weights = None;
    test_spec.br = 1.0 / spec.num_groups as f64;
    let seed = test_seed(seed);
    match spec.mode {
        BiasMode::Foreground | BiasMode::Background => {
            if spec.per_class_count % spec.num_groups != 0 {
                return Err(Error::Config(format!(
                    "per_class_count {} is not divisible by {} groups",
                    spec.per_class_count, spec.num_groups
                )));
            }
            check_palette(palette, spec.num_groups)?;
            let glyphs = generate_glyph_dataset(&test_spec, seed)?;
            let groups = spec.num_groups;
            paint_by_weights(&glyphs, palette, spec.mode, seed, |_| vec![1.0; groups])
        }
        BiasMode::Grayscale => {
            test_spec.validate_loose()?;
            let glyphs = generate_glyph_dataset(&test_spec, seed)?;
            let colored = colorize_uniform(&glyphs, palette, seed)?;
            let original = colored.with_protected(vec![0; colored.len()], 2)?;
            let gray = grayscale_rows(&colored, &vec![true; colored.len()])?;
            let copy = colored.with_images(gray, vec![1; colored.len()], 2)?;
            original.concat(&copy)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::partition_groups;

    fn spec(groups: usize, br: f64, per_class: usize) -> BiasSpec {
        BiasSpec {
            num_classes: 3,
            num_groups: groups,
            br,
            mode: BiasMode::Foreground,
            minority_weights: None,
            resolution: (8, 8),
            per_class_count: per_class,
        }
    }

    #[test]
    fn majority_share_is_exact() {
        let s = spec(10, 0.9, 100);
        let ds = build_training_set(&s, &default_palette(10).unwrap(), 5).unwrap();
        let part = partition_groups(&ds);
        for (y, counts) in part.counts().iter().enumerate() {
            assert_eq!(counts[y % 10], 90);
            assert_eq!(counts.iter().sum::<usize>(), 100);
            assert!(counts.iter().enumerate().all(|(a, &c)| a == y % 10 || (1..=2).contains(&c)));
        }
        assert_eq!(part.measured_bias_ratio(), vec![0.9; 3]);
    }

    #[test]
    fn balanced_edge_and_weighted_minorities() {
        let s = spec(4, 0.25, 100);
        let ds = build_training_set(&s, &default_palette(4).unwrap(), 1).unwrap();
        assert!(partition_groups(&ds).counts().iter().all(|r| r == &vec![25; 4]));

        let mut s = spec(10, 0.9, 1000);
        s.per_class_count = 1000;
        let total: f64 = (1..=9).map(f64::from).sum();
        s.minority_weights = Some((1..=9).map(|k| k as f64 / total).collect());
        let ds = build_training_set(&s, &default_palette(10).unwrap(), 2).unwrap();
        let counts = partition_groups(&ds).counts();
        // 100 minority examples over weights 1..9 / 45
        let want = apportion(100, &(1..=9).map(f64::from).collect::<Vec<_>>());
        for (y, row) in counts.iter().enumerate() {
            assert_eq!(row[y], 900);
            let minority: Vec<usize> = (1..10).map(|k| row[(y + k) % 10]).collect();
            assert_eq!(minority, want);
        }
        assert_eq!(want, vec![2, 4, 7, 9, 11, 13, 16, 18, 20]);
    }

    #[test]
    fn color_bias_keeps_targets_and_paints_modes() {
        let s = spec(2, 0.9, 10);
        let glyphs = generate_glyph_dataset(&s, 0).unwrap();
        let pal = vec![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let fg = apply_color_bias(&glyphs, &s, &pal, 0).unwrap();
        assert_eq!(fg.targets(), glyphs.targets());
        assert_eq!(fg.image_shape(), [3, 8, 8]);
        let mut bg_spec = s.clone();
        bg_spec.mode = BiasMode::Background;
        let bg = apply_color_bias(&glyphs, &bg_spec, &pal, 0).unwrap();
        // example 0 is red in both; fg keeps background black, bg keeps ink white
        let plane = 64;
        let gray = &glyphs.images().data()[..plane];
        let dark = gray.iter().position(|&v| v == 0.0).unwrap();
        assert_eq!(fg.protected()[0], bg.protected()[0]);
        let a = fg.protected()[0];
        assert_eq!(fg.images().data()[dark], 0.0);
        assert_eq!(bg.images().data()[dark], pal[a][0]);
    }

    #[test]
    fn color_bias_rejects_bad_palettes() {
        let s = spec(2, 0.9, 10);
        let glyphs = generate_glyph_dataset(&s, 0).unwrap();
        assert!(apply_color_bias(&glyphs, &s, &default_palette(3).unwrap(), 0).is_err());
        assert!(apply_color_bias(&glyphs, &s, &[[1.0, 0.0, 0.0]; 2], 0).is_err());
    }

    #[test]
    fn grayscale_bias_counts() {
        let mut s = spec(2, 0.9, 100);
        s.num_classes = 4;
        s.mode = BiasMode::Grayscale;
        let ds = build_training_set(&s, &default_palette(4).unwrap(), 3).unwrap();
        let counts = partition_groups(&ds).counts();
        assert_eq!(counts[0], vec![10, 90]);
        assert_eq!(counts[1], vec![10, 90]);
        assert_eq!(counts[2], vec![90, 10]);

        let glyphs = generate_glyph_dataset(&s, 3).unwrap();
        let colored = colorize_uniform(&glyphs, &default_palette(4).unwrap(), 3).unwrap();
        let even = apply_grayscale_bias(&colored, 0.5, 3).unwrap();
        assert!(partition_groups(&even).counts().iter().all(|r| r == &vec![50, 50]));
        assert!(apply_grayscale_bias(&glyphs, 0.9, 3).is_err());
    }

    #[test]
    fn grayscale_is_idempotent() {
        let px: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).fract()).collect();
        let once = grayscale_image(&px);
        assert_eq!(grayscale_image(&once), once);
    }

    #[test]
    fn balanced_test_sets() {
        let s = spec(10, 0.9, 100);
        let test = build_balanced_test(&s, &default_palette(10).unwrap(), 9).unwrap();
        let part = partition_groups(&test);
        assert!(part.counts().iter().all(|r| r == &vec![10; 10]));
        assert!(part.ratios.iter().flatten().all(|&r| r == 0.1));
        assert_eq!(part.measured_bias_ratio(), vec![0.1; 3]);

        assert!(build_balanced_test(&spec(3, 0.9, 100), &default_palette(3).unwrap(), 0).is_err());

        let mut g = spec(2, 0.9, 30);
        g.mode = BiasMode::Grayscale;
        let test = build_balanced_test(&g, &default_palette(4).unwrap(), 0).unwrap();
        assert_eq!(test.len(), 2 * 3 * 30);
        assert!(partition_groups(&test).counts().iter().all(|r| r == &vec![30, 30]));
    }

    #[test]
    fn test_set_differs_from_training_glyphs() {
        let s = spec(2, 0.9, 10);
        let pal = default_palette(2).unwrap();
        let train = build_training_set(&s, &pal, 4).unwrap();
        let test = build_balanced_test(&s, &pal, 4).unwrap();
        assert_ne!(train.images().data(), test.images().data());
    }
}
