use crate::error::{Error, Result};

/// Integer class map, row-major `[height, width]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<usize>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: usize) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.data[row * self.width + col]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Errors on the first label outside `[0, classes)`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.data.iter().position(|&l| l >= classes) {
            Some(i) => Err(Error::Label(format!(
                "label {} at pixel {i} outside [0, {classes})",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    /// Pixel counts per class (labels `>= classes` are ignored).
    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in &self.data {
            if l < classes {
                counts[l] += 1;
            }
        }
        counts
    }
}
