//! Synthetic segmentation data: colored rectangles and disks on a dark
//! background, class identity carried by color. Small enough that a
//! correct architecture segments it almost perfectly within a few hundred
//! optimizer steps, which is what the training acceptance check leans on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One generated sample: `[H, W, 3]` image in `[0, 1]` and a class id per
/// pixel.
#[derive(Debug, Clone)]
pub struct ToySegSample<T> {
    pub image: Tensor<T>,
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

/// Base colors per class; class 0 is the background.
const PALETTE: [[f64; 3]; 8] = [
    [0.16, 0.17, 0.20],
    [0.85, 0.20, 0.15],
    [0.15, 0.75, 0.25],
    [0.20, 0.35, 0.90],
    [0.90, 0.80, 0.20],
    [0.75, 0.20, 0.80],
    [0.15, 0.80, 0.80],
    [0.95, 0.55, 0.15],
];

const COLOR_JITTER: f64 = 0.04;
const PIXEL_NOISE: f64 = 0.03;

/// Deterministically generates `count` samples with classes `0..classes`.
/// Every foreground class is a contiguous disk or rectangle whose color
/// correlates with its class.
pub fn generate_toy_set<T: Scalar>(
    seed: u64,
    count: usize,
    height: usize,
    width: usize,
    classes: usize,
) -> Result<Vec<ToySegSample<T>>> {
    if classes < 2 || classes > PALETTE.len() {
        return Err(Error::parameter(
            "classes",
            format!("need 2..={}, got {classes}", PALETTE.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| generate_sample(&mut rng, height, width, classes))
        .collect()
}

fn generate_sample<T: Scalar>(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    classes: usize,
) -> Result<ToySegSample<T>> {
    let mut labels = vec![0usize; height * width];
    let mut base = vec![[0.0f64; 3]; height * width];
    let jitter = |rng: &mut ChaCha8Rng, c: [f64; 3]| {
        c.map(|v| v + rng.gen_range(-COLOR_JITTER..COLOR_JITTER))
    };
    let bg = jitter(rng, PALETTE[0]);
    for cell in base.iter_mut() {
        *cell = bg;
    }

    let shapes = rng.gen_range(1..=3);
    for _ in 0..shapes {
        let class = rng.gen_range(1..classes);
        let color = jitter(rng, PALETTE[class]);
        let disk = rng.gen_bool(0.5);
        if disk {
            let r = rng.gen_range(height.min(width) / 6..=height.min(width) / 3) as isize;
            let cy = rng.gen_range(0..height) as isize;
            let cx = rng.gen_range(0..width) as isize;
            for y in 0..height as isize {
                for x in 0..width as isize {
                    if (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r {
                        let i = (y * width as isize + x) as usize;
                        labels[i] = class;
                        base[i] = color;
                    }
                }
            }
        } else {
            let h = rng.gen_range(height / 5..=height / 2);
            let w = rng.gen_range(width / 5..=width / 2);
            let y0 = rng.gen_range(0..height - h + 1);
            let x0 = rng.gen_range(0..width - w + 1);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    labels[y * width + x] = class;
                    base[y * width + x] = color;
                }
            }
        }
    }

    let mut data = Vec::with_capacity(height * width * 3);
    for cell in &base {
        for &v in cell {
            let noisy = (v + rng.gen_range(-PIXEL_NOISE..PIXEL_NOISE)).clamp(0.0, 1.0);
            data.push(T::from_f64(noisy));
        }
    }
    Ok(ToySegSample {
        image: Tensor::from_vec(data, &[height, width, 3])?,
        labels,
        height,
        width,
    })
}

impl<T: Scalar> ToySegSample<T> {
    /// The image as a single-sample `[1, H, W, 3]` batch.
    pub fn batch_image(&self) -> Result<Tensor<T>> {
        Tensor::from_vec(
            self.image.data().to_vec(),
            &[1, self.height, self.width, 3],
        )
    }
}

/// Stacks samples into one `[N, H, W, 3]` batch with concatenated labels.
pub fn stack_samples<T: Scalar>(samples: &[ToySegSample<T>]) -> Result<(Tensor<T>, Vec<usize>)> {
    if samples.is_empty() {
        return Err(Error::Usage("empty sample batch".into()));
    }
    let (h, w) = (samples[0].height, samples[0].width);
    let mut data = Vec::with_capacity(samples.len() * h * w * 3);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.height != h || s.width != w {
            return Err(Error::dimension(
                "stack_samples",
                format!("{}x{} vs {h}x{w}", s.height, s.width),
            ));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.labels);
    }
    Ok((Tensor::from_vec(data, &[samples.len(), h, w, 3])?, labels))
}

/// Confusion counts for mean-IoU: one (tp, fp, fn) triple per class.
#[derive(Debug, Clone)]
pub struct IouAccumulator {
    pub classes: usize,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(classes: usize) -> Self {
        IouAccumulator {
            classes,
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
        }
    }

    pub fn update(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::dimension(
                "mean_iou",
                format!("{} predictions vs {} labels", pred.len(), truth.len()),
            ));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if p >= self.classes || t >= self.classes {
                return Err(Error::Data(format!(
                    "class id out of range: pred {p}, truth {t}, classes {}",
                    self.classes
                )));
            }
            if p == t {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[t] += 1;
            }
        }
        Ok(())
    }

    /// Mean over classes of `tp / (tp + fp + fn)`. Classes absent from
    /// both prediction and truth are skipped.
    pub fn mean_iou(&self) -> f64 {
        let mut total = 0.0;
        let mut seen = 0usize;
        for c in 0..self.classes {
            let union = self.tp[c] + self.fp[c] + self.fn_[c];
            if union == 0 {
                continue;
            }
            total += self.tp[c] as f64 / union as f64;
            seen += 1;
        }
        if seen == 0 {
            0.0
        } else {
            total / seen as f64
        }
    }
}

/// One-shot mean-IoU of a single prediction.
pub fn mean_iou(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    let mut acc = IouAccumulator::new(classes);
    acc.update(pred, truth)?;
    Ok(acc.mean_iou())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let a: Vec<ToySegSample<f32>> = generate_toy_set(9, 3, 32, 32, 2).unwrap();
        let b: Vec<ToySegSample<f32>> = generate_toy_set(9, 3, 32, 32, 2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.labels, y.labels);
        }
        for s in &a {
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.labels.iter().all(|&l| l < 2));
        }
    }

    #[test]
    fn every_sample_contains_foreground() {
        let set: Vec<ToySegSample<f32>> = generate_toy_set(11, 8, 64, 64, 2).unwrap();
        for s in &set {
            assert!(s.labels.iter().any(|&l| l == 1));
            assert!(s.labels.iter().any(|&l| l == 0));
        }
    }

    #[test]
    fn foreground_color_separates_from_background() {
        let set: Vec<ToySegSample<f64>> = generate_toy_set(13, 4, 32, 32, 2).unwrap();
        for s in &set {
            for (i, &l) in s.labels.iter().enumerate() {
                let r = s.image.data()[i * 3].to_f64();
                if l == 1 {
                    // Red-ish foreground vs dark background.
                    assert!(r > 0.5, "pixel {i} labeled fg but r={r}");
                } else {
                    assert!(r < 0.35, "pixel {i} labeled bg but r={r}");
                }
            }
        }
    }

    #[test]
    fn miou_perfect_prediction_is_one() {
        let truth = vec![0, 1, 1, 0, 1];
        assert_eq!(mean_iou(&truth, &truth, 2).unwrap(), 1.0);
    }

    #[test]
    fn miou_matches_confusion_matrix_oracle() {
        let pred = vec![0, 1, 1, 0, 2, 2, 1, 0];
        let truth = vec![0, 1, 0, 0, 2, 1, 1, 2];
        let got = mean_iou(&pred, &truth, 3).unwrap();

        // Oracle: build the full confusion matrix, then per-class IoU.
        let k = 3usize;
        let mut cm = vec![vec![0u64; k]; k];
        for (&p, &t) in pred.iter().zip(&truth) {
            cm[t][p] += 1;
        }
        let mut sum = 0.0;
        let mut n = 0;
        for c in 0..k {
            let tp = cm[c][c];
            let fp: u64 = (0..k).filter(|&t| t != c).map(|t| cm[t][c]).sum();
            let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm[c][p]).sum();
            let union = tp + fp + fn_;
            if union > 0 {
                sum += tp as f64 / union as f64;
                n += 1;
            }
        }
        let want = sum / n as f64;
        assert_eq!(got, want);
    }

    #[test]
    fn miou_rejects_out_of_range_ids() {
        assert!(mean_iou(&[0, 5], &[0, 1], 2).is_err());
    }

    #[test]
    fn stacking_concatenates_batch_axis() {
        let set: Vec<ToySegSample<f32>> = generate_toy_set(15, 3, 32, 32, 2).unwrap();
        let (batch, labels) = stack_samples(&set).unwrap();
        assert_eq!(batch.shape(), &[3, 32, 32, 3]);
        assert_eq!(labels.len(), 3 * 32 * 32);
        assert_eq!(&labels[0..1024], &set[0].labels[..]);
    }
}
