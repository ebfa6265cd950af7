use crate::error::{Error, Result};
use crate::stimulus::{DatasetIndex, RgbImage, Split};
use crate::tensor::{Real, Tensor};

/// Decoded images kept as bytes, with labels in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    /// `[h, w, c]` of every image.
    pub shape: [usize; 3],
    pixels: Vec<u8>,
    pub labels: Vec<usize>,
    /// Dataset index of each image.
    pub ids: Vec<usize>,
}

impl LabeledSet {
    pub fn from_images(images: &[RgbImage], labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!("{} images, {} labels", images.len(), labels.len())));
        }
        let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image set".into()))?;
        let shape = [first.height(), first.width(), 3];
        let mut pixels = Vec::with_capacity(images.len() * shape.iter().product::<usize>());
        for img in images {
            if img.width() != shape[1] || img.height() != shape[0] {
                return Err(Error::InvalidArgument("images differ in size".into()));
            }
            pixels.extend_from_slice(img.raw());
        }
        Ok(Self { shape, pixels, ids: (0..labels.len()).collect(), labels })
    }

    /// Decodes one split of a dataset with `workers` threads. The result does
    /// not depend on the worker count.
    pub fn load(index: &DatasetIndex, split: Split, workers: usize) -> Result<Self> {
        let records = index.split(split);
        if records.is_empty() {
            return Err(Error::Dataset { path: index.root.clone(), detail: format!("no {} images", split.name()) });
        }
        let workers = workers.clamp(1, records.len());
        let mut decoded: Vec<Option<RgbImage>> = vec![None; records.len()];
        std::thread::scope(|s| -> Result<()> {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let records = &records;
                    s.spawn(move || -> Result<Vec<(usize, RgbImage)>> {
                        (w..records.len()).step_by(workers).map(|i| Ok((i, index.load_image(records[i])?))).collect()
                    })
                })
                .collect();
            for h in handles {
                for (i, img) in h.join().expect("decoder thread panicked")? {
                    decoded[i] = Some(img);
                }
            }
            Ok(())
        })?;
        let images: Vec<RgbImage> = decoded.into_iter().map(|d| d.expect("every slot decoded")).collect();
        let mut set = Self::from_images(&images, records.iter().map(|r| r.label as usize).collect())?;
        set.ids = records.iter().map(|r| r.idx).collect();
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> Result<RgbImage> {
        let n = self.shape.iter().product::<usize>();
        RgbImage::from_raw(self.shape[1], self.shape[0], self.pixels[i * n..(i + 1) * n].to_vec())
    }

    /// `(n, h, w, c)` batch scaled to `[0, 1]`, with its labels.
    pub fn batch<R: Real>(&self, idx: &[usize]) -> (Tensor<R>, Vec<usize>) {
        let n = self.shape.iter().product::<usize>();
        let scale = 1.0 / 255.0;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend(self.pixels[i * n..(i + 1) * n].iter().map(|&b| R::from_f64_lossy(b as f64 * scale)));
        }
        let [h, w, c] = self.shape;
        let t = Tensor::new(vec![idx.len(), h, w, c], data).expect("batch shape matches data");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// The images at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let n = self.shape.iter().product::<usize>();
        let mut pixels = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            pixels.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
        }
        Self {
            shape: self.shape,
            pixels,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Fraction of images per label.
    pub fn balance(&self) -> [f64; 2] {
        let pos = self.labels.iter().filter(|&&l| l == 1).count() as f64;
        let n = self.len() as f64;
        [(n - pos) / n, pos / n]
    }
}
