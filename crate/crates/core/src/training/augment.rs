use rand::Rng;

use crate::mask::Mask;

/// A horizontal flip followed by `quarter_turns` counter-clockwise 90° turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Augmentation {
    pub const IDENTITY: Self = Self {
        flip: false,
        quarter_turns: 0,
    };

    /// Flip with probability 1/2, turn count uniform in `0..4`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let flip = rng.gen_bool(0.5);
        let quarter_turns = rng.gen_range(0..4u8);
        Self {
            flip,
            quarter_turns,
        }
    }

    /// Applies the transform to a row-major `h x w` raster; returns the new
    /// raster and its `(h, w)`.
    pub fn apply<P: Copy>(&self, src: &[P], h: usize, w: usize) -> (Vec<P>, usize, usize) {
        assert_eq!(src.len(), h * w, "raster size");
        let mut cur = if self.flip {
            src.chunks(w)
                .flat_map(|row| row.iter().rev().copied())
                .collect()
        } else {
            src.to_vec()
        };
        let (mut h, mut w) = (h, w);
        for _ in 0..self.quarter_turns % 4 {
            // Counter-clockwise: new[y][x] = old[x][w - 1 - y], new size w x h.
            let mut next = Vec::with_capacity(cur.len());
            for y in 0..w {
                for x in 0..h {
                    next.push(cur[x * w + (w - 1 - y)]);
                }
            }
            cur = next;
            (h, w) = (w, h);
        }
        (cur, h, w)
    }
}

/// Applies one transform to an image and its mask alike.
pub fn augment<R: Rng + ?Sized>(image: &[f32], mask: &Mask, rng: &mut R) -> (Vec<f32>, Mask) {
    augment_with(Augmentation::sample(rng), image, mask)
}

pub fn augment_with(a: Augmentation, image: &[f32], mask: &Mask) -> (Vec<f32>, Mask) {
    let (img, _, _) = a.apply(image, mask.h, mask.w);
    let (labels, h, w) = a.apply(&mask.labels, mask.h, mask.w);
    (img, Mask { h, w, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn sample_mask() -> (Vec<f32>, Mask) {
        let labels: Vec<u8> = (0..6).collect();
        let image = labels.iter().map(|&l| l as f32 / 10.0).collect();
        (image, Mask::new(2, 3, labels).unwrap())
    }

    #[test]
    fn one_turn_is_counter_clockwise() {
        let (_, m) = sample_mask();
        let a = Augmentation {
            flip: false,
            quarter_turns: 1,
        };
        let (_, turned) = augment_with(a, &[0.0; 6], &m);
        // 0 1 2        2 5
        // 3 4 5   ->   1 4
        //              0 3
        assert_eq!((turned.h, turned.w), (3, 2));
        assert_eq!(turned.labels, vec![2, 5, 1, 4, 0, 3]);
    }

    #[test]
    fn double_flip_and_four_turns_are_identity() {
        let (img, m) = sample_mask();
        let flip = Augmentation {
            flip: true,
            quarter_turns: 0,
        };
        let (i1, m1) = augment_with(flip, &img, &m);
        assert_eq!(m1.labels, vec![2, 1, 0, 5, 4, 3]);
        assert_eq!(augment_with(flip, &i1, &m1), (img.clone(), m.clone()));
        let turn = Augmentation {
            flip: false,
            quarter_turns: 1,
        };
        let (mut i, mut mm) = (img.clone(), m.clone());
        for _ in 0..4 {
            (i, mm) = augment_with(turn, &i, &mm);
        }
        assert_eq!((i, mm), (img, m));
    }

    #[test]
    fn image_and_mask_move_together_and_labels_are_preserved() {
        let (img, m) = sample_mask();
        let mut rng = stream(3, Stream::Augment);
        for _ in 0..32 {
            let (i, mm) = augment(&img, &m, &mut rng);
            for (v, l) in i.iter().zip(&mm.labels) {
                assert_eq!(*v, *l as f32 / 10.0);
            }
            let mut sorted = mm.labels.clone();
            sorted.sort();
            assert_eq!(sorted, m.labels);
        }
    }

    #[test]
    fn sampling_covers_all_eight_transforms() {
        let mut rng = stream(4, Stream::Augment);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            let a = Augmentation::sample(&mut rng);
            seen.insert((a.flip, a.quarter_turns));
        }
        assert_eq!(seen.len(), 8);
    }
}
