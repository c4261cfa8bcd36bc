//! Loading volumes for an experiment, batching patches and tiled inference.

use std::path::Path;

use voxseg::data::{
    check_patch_fits, grid_origins, read_nifti_pair, read_raw_volume, stitch, DatasetSplit, HuWindow, Patch,
    VolumeSample,
};
use voxseg::metrics::{binarize, confusion, metrics_from_confusion};
use voxseg::{losses, BinaryField, ConfusionCounts, LossReport, Metrics, Model, SoftmaxField, Tensor, TverskyParams};
use voxseg::AdaptiveWeights;

use crate::config::{ExperimentConfig, VolumeFormat};
use crate::error::CliError;

/// Reads one split with intensities already mapped through the HU window.
pub fn load_split(cfg: &ExperimentConfig, split: &DatasetSplit, name: &str) -> Result<Vec<VolumeSample>, CliError> {
    let ids = split
        .get(name)
        .ok_or_else(|| CliError::Config(format!("unknown split `{name}`; use train, val or test")))?;
    let window = cfg.data.window()?;
    ids.iter()
        .map(|id| {
            let mut s = read_volume(&cfg.data.dir, cfg.data.format, id)?;
            normalize_in_place(&mut s, window);
            Ok(s)
        })
        .collect()
}

pub fn read_volume(dir: &Path, format: VolumeFormat, id: &str) -> Result<VolumeSample, CliError> {
    Ok(match format {
        VolumeFormat::Raw => read_raw_volume(dir, id)?,
        VolumeFormat::Nifti => read_nifti_pair(id, &dir.join(format!("{id}.nii")), &dir.join(format!("{id}.seg.nii")))?,
    })
}

pub fn normalize_in_place(sample: &mut VolumeSample, window: HuWindow) {
    for v in &mut sample.image {
        *v = window.apply(*v);
    }
}

/// Stacks patches into a `(B, 1, D, H, W)` input and `(B, D, H, W)` labels.
pub fn make_batch(patches: &[&Patch]) -> Result<(Tensor<f32>, BinaryField), CliError> {
    let [d, h, w] = patches[0].extent;
    let b = patches.len();
    let mut image = Vec::with_capacity(b * d * h * w);
    let mut label = Vec::with_capacity(b * d * h * w);
    for p in patches {
        image.extend_from_slice(&p.image);
        label.extend_from_slice(&p.label);
    }
    Ok((Tensor::new(vec![b, 1, d, h, w], image)?, BinaryField::new([b, d, h, w], label)?))
}

/// Per-volume evaluation outcome.
#[derive(Clone, Debug)]
pub struct VolumeEval {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    pub loss: LossReport,
}

/// Grid-tiled inference stitched back into a foreground probability map.
pub fn predict_volume(
    model: &Model<f32>,
    sample: &VolumeSample,
    tile: [usize; 3],
    batch_size: usize,
) -> Result<Vec<f32>, CliError> {
    let tile: [usize; 3] = std::array::from_fn(|a| tile[a].min(sample.dims[a]));
    check_patch_fits(tile, sample.dims)?;
    model.config().check_input(tile)?;
    let axes: [Vec<usize>; 3] = std::array::from_fn(|a| grid_origins(sample.dims[a], tile[a]));
    let mut origins = Vec::new();
    for &z in &axes[0] {
        for &y in &axes[1] {
            for &x in &axes[2] {
                origins.push([z, y, x]);
            }
        }
    }
    let voxels: usize = tile.iter().product();
    let mut probs: Vec<([usize; 3], Vec<f32>)> = Vec::with_capacity(origins.len());
    for chunk in origins.chunks(batch_size) {
        let mut data = Vec::with_capacity(chunk.len() * voxels);
        for &o in chunk {
            data.extend(voxseg::data::crop(&sample.image, sample.dims, o, tile));
        }
        let input = Tensor::new(vec![chunk.len(), 1, tile[0], tile[1], tile[2]], data)?;
        let out = model.predict(&input)?;
        for (i, &o) in chunk.iter().enumerate() {
            probs.push((o, out.channel(i, 0).to_vec()));
        }
    }
    let tiles: Vec<_> = probs.iter().map(|(o, p)| (*o, tile, p.as_slice())).collect();
    Ok(stitch(sample.dims, &tiles)?)
}

pub fn evaluate_volume(
    model: &Model<f32>,
    sample: &VolumeSample,
    tile: [usize; 3],
    batch_size: usize,
    weights: AdaptiveWeights,
    params: &TverskyParams,
) -> Result<VolumeEval, CliError> {
    let fg = predict_volume(model, sample, tile, batch_size)?;
    let [d, h, w] = sample.dims;
    let field = SoftmaxField::from_foreground([1, d, h, w], &fg)?;
    let truth = BinaryField::new([1, d, h, w], sample.label.clone())?;
    let loss = losses::total_loss(&field, &truth, weights, params)?;
    let pred = binarize(&field);
    let counts = confusion(pred.data(), truth.data())?;
    Ok(VolumeEval {
        id: sample.id.clone(),
        counts,
        metrics: metrics_from_confusion(&counts),
        loss,
    })
}

/// Mean metrics over volumes; all ones for an empty set.
pub fn mean_metrics(evals: &[VolumeEval]) -> Metrics {
    let items: Vec<Metrics> = evals.iter().map(|e| e.metrics).collect();
    Metrics::mean(&items).unwrap_or_else(|| metrics_from_confusion(&ConfusionCounts::default()))
}

/// Metrics of the voxel counts pooled over all volumes.
pub fn pooled_metrics(evals: &[VolumeEval]) -> Metrics {
    metrics_from_confusion(&evals.iter().map(|e| e.counts).sum())
}
