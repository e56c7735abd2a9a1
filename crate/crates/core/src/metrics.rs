//! Evaluation helpers for translated images.

use nalgebra::{DMatrix, DVector};

use crate::datamodel::Image;
use crate::error::{Error, Result};

const FEATURES: usize = 7;

fn features(img: &Image) -> [f64; FEATURES] {
    let s = img.color_stats();
    [s[0], s[1], s[2], s[3], s[4], s[5], 1.0]
}

/// Linear least-squares classifier on per-channel color mean and spread,
/// one-vs-all with targets ±1. Prediction is the highest score.
#[derive(Clone, Debug)]
pub struct ColorClassifier {
    /// `FEATURES × classes`.
    weights: DMatrix<f64>,
}

impl ColorClassifier {
    pub fn fit(images: &[Image], labels: &[usize], n_classes: usize) -> Result<Self> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::validation(
                "classifier needs matching, non-empty images and labels",
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::validation(format!(
                "label {l} out of range for {n_classes} classes"
            )));
        }
        let x = DMatrix::from_fn(images.len(), FEATURES, |i, j| features(&images[i])[j]);
        let y = DMatrix::from_fn(images.len(), n_classes, |i, c| {
            if labels[i] == c {
                1.0
            } else {
                -1.0
            }
        });
        let weights = x
            .svd(true, true)
            .solve(&y, 1e-12)
            .map_err(|e| Error::validation(format!("least squares failed: {e}")))?;
        Ok(Self { weights })
    }

    pub fn scores(&self, img: &Image) -> Vec<f64> {
        let f = DVector::from_row_slice(&features(img));
        (self.weights.transpose() * f).iter().copied().collect()
    }

    pub fn predict(&self, img: &Image) -> usize {
        let s = self.scores(img);
        (0..s.len()).fold(0, |best, c| if s[c] > s[best] { c } else { best })
    }

    /// Fraction of `images` predicted as their label.
    pub fn accuracy(&self, images: &[Image], labels: &[usize]) -> f64 {
        let right = images
            .iter()
            .zip(labels)
            .filter(|(img, &l)| self.predict(img) == l)
            .count();
        right as f64 / images.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_flat_colors() {
        let red = |v: f64| Image::filled(4, 4, [v, -0.5, -0.5]).unwrap();
        let blue = |v: f64| Image::filled(4, 4, [-0.5, -0.5, v]).unwrap();
        let imgs = vec![red(0.8), red(0.6), blue(0.7), blue(0.9)];
        let labels = [0, 0, 1, 1];
        let clf = ColorClassifier::fit(&imgs, &labels, 2).unwrap();
        assert_eq!(clf.accuracy(&imgs, &labels), 1.0);
        assert_eq!(clf.predict(&red(0.75)), 0);
    }

    #[test]
    fn rejects_bad_labels() {
        let img = Image::filled(4, 4, [0.0; 3]).unwrap();
        assert!(ColorClassifier::fit(&[img], &[3], 2).is_err());
    }
}
