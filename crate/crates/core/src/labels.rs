//! Per-pixel class maps.
//!
//! Lanes are classes `1..=C`, background is `C + 1`, and [`UNLABELED`] marks
//! pixels that carry no supervision (hidden target labels, filtered
//! pseudo-labels).

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

pub const UNLABELED: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    height: usize,
    width: usize,
    num_lanes: usize,
    classes: Vec<u8>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, num_lanes: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::shape(
                "class_map",
                format!("{} entries for {height}x{width}", classes.len()),
            ));
        }
        let bg = num_lanes as u8 + 1;
        if let Some(bad) = classes.iter().find(|&&c| c != UNLABELED && !(1..=bg).contains(&c)) {
            return Err(Error::Data(format!("class {bad} outside 1..={bg}")));
        }
        Ok(Self {
            height,
            width,
            num_lanes,
            classes,
        })
    }

    pub fn filled(height: usize, width: usize, num_lanes: usize, class: u8) -> Self {
        Self {
            height,
            width,
            num_lanes,
            classes: vec![class; height * width],
        }
    }

    /// Per-pixel argmax of a `[C + 1, H, W]` score map, ties to the lowest class.
    pub fn argmax_of(scores: &Tensor) -> Result<Self> {
        scores.expect_rank("argmax", 3)?;
        let (c, hw) = scores.chw_split();
        let v = scores.values();
        let classes = (0..hw)
            .map(|p| ops::argmax((0..c).map(|ch| v[ch * hw + p])) as u8 + 1)
            .collect();
        Ok(Self {
            height: scores.shape()[1],
            width: scores.shape()[2],
            num_lanes: c - 1,
            classes,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_lanes(&self) -> usize {
        self.num_lanes
    }

    pub fn background(&self) -> u8 {
        self.num_lanes as u8 + 1
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, pos: usize) -> u8 {
        self.classes[pos]
    }

    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.width + col]
    }

    pub fn set(&mut self, pos: usize, class: u8) {
        self.classes[pos] = class;
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn is_lane(&self, pos: usize) -> bool {
        let c = self.classes[pos];
        c != UNLABELED && (c as usize) <= self.num_lanes
    }

    /// `[C + 1, H, W]` one-hot targets; unlabeled pixels get an all-zero row.
    pub fn one_hot(&self) -> Vec<f64> {
        let hw = self.classes.len();
        let mut out = vec![0.0; (self.num_lanes + 1) * hw];
        for (p, &c) in self.classes.iter().enumerate() {
            if c != UNLABELED {
                out[(c as usize - 1) * hw + p] = 1.0;
            }
        }
        out
    }

    /// Nearest-neighbour resampling by an integer factor (top-left sample of
    /// every block, which is the centre tap of a stride-`factor` kernel).
    pub fn downsample(&self, factor: usize) -> Self {
        let (h, w) = (self.height / factor, self.width / factor);
        let mut classes = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                classes.push(self.at(i * factor, j * factor));
            }
        }
        Self {
            height: h,
            width: w,
            num_lanes: self.num_lanes,
            classes,
        }
    }

    pub fn upsample(&self, factor: usize) -> Self {
        let (h, w) = (self.height * factor, self.width * factor);
        let mut classes = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                classes.push(self.at(i / factor, j / factor));
            }
        }
        Self {
            height: h,
            width: w,
            num_lanes: self.num_lanes,
            classes,
        }
    }

    /// Mirror image along the vertical axis.
    pub fn flipped(&self) -> Self {
        let mut classes = Vec::with_capacity(self.classes.len());
        for i in 0..self.height {
            for j in (0..self.width).rev() {
                classes.push(self.at(i, j));
            }
        }
        Self {
            classes,
            ..self.clone()
        }
    }
}
