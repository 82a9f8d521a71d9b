use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Integer label map of one image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::shape(
                "Mask::new",
                &[h, w],
                &[labels.len()],
                "label count must equal h*w",
            ));
        }
        Ok(Self { h, w, labels })
    }

    pub fn filled(h: usize, w: usize, label: u8) -> Self {
        Self {
            h,
            w,
            labels: vec![label; h * w],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn contains(&self, class: u8) -> bool {
        self.labels.contains(&class)
    }
}

/// Per-pixel argmax over the class channels; ties go to the lower class index.
pub fn argmax_channels<T: Scalar>(logits: &Tensor<T>) -> Vec<Mask> {
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    (0..n)
        .map(|i| {
            let s = logits.sample(i);
            let labels = (0..plane)
                .map(|p| {
                    let mut best = 0usize;
                    for k in 1..c {
                        if s[k * plane + p] > s[best * plane + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            Mask { h, w, labels }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_maximum_wins() {
        let logits =
            Tensor::<f64>::from_fn([1, 4, 2, 3], |[_, c, _, _]| if c == 2 { 5.0 } else { 1.0 });
        assert_eq!(argmax_channels(&logits)[0], Mask::filled(2, 3, 2));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let logits =
            Tensor::<f64>::from_fn(
                [1, 4, 1, 2],
                |[_, c, _, _]| if c == 0 || c == 3 { 2.0 } else { -1.0 },
            );
        assert_eq!(argmax_channels(&logits)[0].labels, vec![0, 0]);
    }

    #[test]
    fn batch_order_is_preserved() {
        let logits = Tensor::<f64>::from_fn(
            [2, 3, 2, 2],
            |[n, c, _, _]| if c == n + 1 { 1.0 } else { 0.0 },
        );
        let masks = argmax_channels(&logits);
        assert_eq!(masks.len(), 2);
        assert_eq!(masks[0], Mask::filled(2, 2, 1));
        assert_eq!(masks[1], Mask::filled(2, 2, 2));
    }
}
