//! On-disk dataset layout: `manifest.json` plus one `OWT1` tensor per image
//! under `images/`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, CategoryId, CategoryTaxonomy, DatasetSplit, Sample, SplitRole, ToyImage};
use crate::error::{Error, Result};
use crate::tensor::{write_atomic, Tensor};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "owsol-dataset-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub image: String,
    pub label: CategoryId,
    pub split_role: SplitRole,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub taxonomy: CategoryTaxonomy,
    pub samples: Vec<SampleRecord>,
}

pub fn manifest_of(split: &DatasetSplit) -> Manifest {
    let mut samples: Vec<SampleRecord> = [&split.labeled, &split.unlabeled, &split.val, &split.test]
        .into_iter()
        .flatten()
        .map(|s| SampleRecord {
            id: s.id,
            image: image_path(s.id),
            label: s.ground_truth(),
            split_role: s.split_role,
            boxes: s.gt_boxes.clone(),
        })
        .collect();
    samples.sort_by_key(|r| r.id);
    Manifest {
        format: FORMAT.to_string(),
        taxonomy: split.taxonomy.clone(),
        samples,
    }
}

fn image_path(id: usize) -> String {
    format!("images/{id:06}.owt")
}

fn image_tensor(image: &ToyImage) -> Tensor {
    Tensor::new(
        vec![image.channels(), image.height(), image.width()],
        image.data().to_vec(),
    )
    .expect("image extents are consistent")
}

pub fn save_dataset(split: &DatasetSplit, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    for s in [&split.labeled, &split.unlabeled, &split.val, &split.test]
        .into_iter()
        .flatten()
    {
        image_tensor(&s.image).write(&dir.join(image_path(s.id)))?;
    }
    let json = serde_json::to_vec_pretty(&manifest_of(split))?;
    write_atomic(&dir.join(MANIFEST), &json)
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.format != FORMAT {
        return Err(Error::format(&path, format!("unsupported format {:?}", manifest.format)));
    }
    let mut split = DatasetSplit {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        taxonomy: manifest.taxonomy,
    };
    for rec in manifest.samples {
        let ipath = dir.join(&rec.image);
        let t = Tensor::read(&ipath)?;
        let &[c, h, w] = t.dims() else {
            return Err(Error::format(&ipath, "image tensor must have rank 3"));
        };
        let image = ToyImage::new(w, h, c, t.into_data()).map_err(|e| Error::format(&ipath, e.to_string()))?;
        let sample = Sample::new(rec.id, image, rec.label, rec.boxes, rec.split_role);
        match rec.split_role {
            SplitRole::Labeled => split.labeled.push(sample),
            SplitRole::Unlabeled => split.unlabeled.push(sample),
            SplitRole::Val => split.val.push(sample),
            SplitRole::Test => split.test.push(sample),
        }
    }
    Ok(split)
}
