//! Held-out depth evaluation and the three-panel depth figure: projected
//! LiDAR depth, predicted argmax-bin depth and the RGB view.

use crate::error::Result;
use crate::geometry::{project_points, render_sparse_depth, DepthBinning, PointCloud};
use crate::image::{depth_to_image, RgbImage};
use crate::losses::{depth_bce_loss, uniform_depth_bce};
use crate::nn::{ParamStore, Tensor};
use crate::pipeline::Models;
use crate::synth::{CameraView, SceneSample};

/// Mean per-pixel depth BCE over every LiDAR-supervised pixel of every view,
/// next to the analytic value of the uniform predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthBce {
    pub mean: f64,
    pub uniform: f64,
    pub pixels: usize,
}

pub fn held_out_depth_bce(models: &Models, params: &ParamStore, scenes: &[SceneSample]) -> Result<DepthBce> {
    let binning = &models.config.binning;
    let mut sum = 0.0;
    let mut pixels = 0;
    for scene in scenes {
        for view in &scene.views {
            let k = &view.intrinsics;
            let sparse = render_sparse_depth(&project_points(&scene.cloud, &view.extrinsic, k), k.width, k.height);
            let pred = predict(models, params, view)?;
            let loss = depth_bce_loss(&pred, &sparse, binning)?;
            if !loss.empty {
                let n = sparse.valid_count();
                sum += loss.value * n as f64;
                pixels += n;
            }
        }
    }
    let mean = if pixels == 0 { 0.0 } else { sum / pixels as f64 };
    Ok(DepthBce { mean, uniform: uniform_depth_bce(binning.bins), pixels })
}

fn predict(models: &Models, params: &ParamStore, view: &CameraView) -> Result<Tensor> {
    let features = models.teacher_features(params, &view.image.to_tensor())?;
    models.predict_depth(params, &features, &view.intrinsics)
}

/// Center of the most probable bin at every pixel; ties go to the nearer bin.
pub fn argmax_depth(pred: &Tensor, binning: &DepthBinning) -> Vec<f64> {
    let centers = binning.centers();
    pred.data()
        .chunks(binning.bins)
        .map(|row| {
            let best = row.iter().enumerate().fold(0, |b, (i, &p)| if p > row[b] { i } else { b });
            centers[best]
        })
        .collect()
}

/// Absolute depth errors summed over pixels whose true depth lies inside the
/// binned range.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DepthMae {
    pub predicted: f64,
    /// Constant prediction at the mean bin center, the expectation of the
    /// uniform distribution.
    pub uniform: f64,
    pub pixels: usize,
}

impl DepthMae {
    pub fn add(&mut self, other: &DepthMae) {
        self.predicted += other.predicted;
        self.uniform += other.uniform;
        self.pixels += other.pixels;
    }

    pub fn mean_predicted(&self) -> f64 {
        self.predicted / self.pixels.max(1) as f64
    }

    pub fn mean_uniform(&self) -> f64 {
        self.uniform / self.pixels.max(1) as f64
    }
}

pub struct DepthRender {
    /// Sparse LiDAR depth, predicted depth and RGB, side by side.
    pub panels: RgbImage,
    pub mae: DepthMae,
}

pub fn render_view(models: &Models, params: &ParamStore, cloud: &PointCloud, view: &CameraView) -> Result<DepthRender> {
    let binning = &models.config.binning;
    let k = &view.intrinsics;
    let pred = argmax_depth(&predict(models, params, view)?, binning);
    let expected = binning.centers().iter().sum::<f64>() / binning.bins as f64;
    let mut mae = DepthMae::default();
    for (&truth, &p) in view.depth.iter().zip(&pred) {
        if (binning.d_min..=binning.d_max).contains(&truth) {
            mae.predicted += (p - truth).abs();
            mae.uniform += (expected - truth).abs();
            mae.pixels += 1;
        }
    }
    let sparse = render_sparse_depth(&project_points(cloud, &view.extrinsic, k), k.width, k.height);
    let (lo, hi) = (binning.d_min, binning.d_max);
    let predicted: Vec<Option<f64>> = pred.into_iter().map(Some).collect();
    let panels = RgbImage::hstack(&[
        depth_to_image(k.width, k.height, &sparse.depth, lo, hi),
        depth_to_image(k.width, k.height, &predicted, lo, hi),
        view.image.clone(),
    ]);
    Ok(DepthRender { panels, mae })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::ModelConfig;
    use crate::synth::{generate_scene, SceneConfig};

    #[test]
    fn argmax_picks_bin_centers() {
        let b = DepthBinning::new(1.0, 5.0, 4).unwrap();
        let pred = Tensor::new(vec![1, 2, 4], vec![0.1, 0.6, 0.2, 0.1, 0.25, 0.25, 0.25, 0.25]).unwrap();
        assert_eq!(argmax_depth(&pred, &b), vec![2.5, 1.5]);
    }

    #[test]
    fn untrained_head_is_near_uniform() {
        // a zeroed classifier gives exactly the uniform BCE
        let models = Models::new(&ModelConfig::default()).unwrap();
        let mut params = models.init(0);
        let names: Vec<String> = params.iter().filter(|(k, _)| k.starts_with("depth.classifier")).map(|(k, _)| k.clone()).collect();
        for n in names {
            let shape = params.get(&n).unwrap().shape().to_vec();
            params.insert(n, Tensor::zeros(&shape));
        }
        let scene = generate_scene(&SceneConfig::default()).unwrap();
        let r = held_out_depth_bce(&models, &params, std::slice::from_ref(&scene)).unwrap();
        assert!(r.pixels > 0);
        assert!((r.mean - r.uniform).abs() < 1e-9, "{} vs {}", r.mean, r.uniform);
    }

    #[test]
    fn panels_are_three_views_wide() {
        let models = Models::new(&ModelConfig::default()).unwrap();
        let params = models.init(1);
        let scene = generate_scene(&SceneConfig::default()).unwrap();
        let r = render_view(&models, &params, &scene.cloud, &scene.views[0]).unwrap();
        assert_eq!(r.panels.width, 3 * scene.views[0].intrinsics.width);
        assert!(r.mae.pixels > 0);
        assert!(r.mae.mean_uniform() > 0.0);
    }
}
