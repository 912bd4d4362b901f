//! Scientific probes: gaze/appearance disentanglement under controlled
//! perturbations, attention-map export helpers, and embedding dumps for
//! latent-space visualization.

use crate::model::GazeShiftModel;
use crate::rng::stream;
use crate::syntheye::{render, EyeSceneParams, GrayImage, RenderError};
use crate::tensor::{Graph, ResizeMode};
use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least 2 variants per regime, got {0}")]
    TooFewVariants(usize),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// `1 - cos(a, b)`, in [0, 2] for nonzero vectors.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

/// Mean over all unordered pairs.
pub fn mean_pairwise_cosine(vs: &[Vec<f64>]) -> f64 {
    let n = vs.len();
    if n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    let mut c = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            s += cosine_distance(&vs[i], &vs[j]);
            c += 1;
        }
    }
    s / c as f64
}

/// Mean distance to the centroid (the alternative reading of "average
/// cosine distance"; both are reported).
pub fn mean_to_centroid_cosine(vs: &[Vec<f64>]) -> f64 {
    let n = vs.len();
    if n == 0 {
        return 0.0;
    }
    let d = vs[0].len();
    let mut centroid = vec![0.0; d];
    for v in vs {
        for (c, x) in centroid.iter_mut().zip(v) {
            *c += x;
        }
    }
    for c in centroid.iter_mut() {
        *c /= n as f64;
    }
    vs.iter().map(|v| cosine_distance(v, &centroid)).sum::<f64>() / n as f64
}

/// Standard error of the per-pair distances around their mean (used for the
/// statistical-equality reading of orderings).
pub fn pairwise_cosine_stderr(vs: &[Vec<f64>]) -> f64 {
    let n = vs.len();
    if n < 3 {
        return 0.0;
    }
    let mut ds = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            ds.push(cosine_distance(&vs[i], &vs[j]));
        }
    }
    let m = ds.iter().sum::<f64>() / ds.len() as f64;
    let var = ds.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (ds.len() - 1) as f64;
    (var / ds.len() as f64).sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct DisentanglementReport {
    pub gaze_emb_dist_under_appearance_perturb: f64,
    pub appearance_emb_dist_under_appearance_perturb: f64,
    pub gaze_emb_dist_under_gaze_perturb: f64,
    pub appearance_emb_dist_under_gaze_perturb: f64,
    /// Centroid-based variants of the four numbers above.
    pub centroid_gaze_under_appearance: f64,
    pub centroid_appearance_under_appearance: f64,
    pub centroid_gaze_under_gaze: f64,
    pub centroid_appearance_under_gaze: f64,
    pub stderr_appearance_under_appearance: f64,
    pub stderr_appearance_under_gaze: f64,
    pub n_appearance_variants: usize,
    pub n_gaze_variants: usize,
}

/// Multiplicative gain in [0.7, 1.3] and gamma in [0.8, 1.25], the
/// illumination/contrast perturbation model.
pub fn photometric_perturb(img: &GrayImage, gain: f64, gamma: f64) -> GrayImage {
    img.mapv(|v| (((v as f64).max(0.0).powf(gamma)) * gain).clamp(0.0, 1.0) as f32)
}

fn embed_pair(
    model: &mut GazeShiftModel<f32>,
    img: &GrayImage,
) -> Result<(Vec<f64>, Vec<f64>), AnalysisError> {
    let x: Array4<f32> = crate::model::normalize_batch(&[img]);
    let gaze = model.encode_gaze(&x)?;
    let app = model.encode_appearance(&x)?;
    let g: Vec<f64> = gaze.iter().map(|&v| v as f64).collect();
    // flattened appearance map, L2-normalized per map
    let mut a: Vec<f64> = app.iter().map(|&v| v as f64).collect();
    let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        for v in a.iter_mut() {
            *v /= n;
        }
    }
    Ok((g, a))
}

/// Probe a trained model on the synthetic generator: appearance
/// perturbations are photometric variations of one fixed-gaze render; gaze
/// perturbations are renders of the same appearance at distinct gaze
/// directions under fixed lighting.
pub fn disentanglement_probe_synthetic(
    model: &mut GazeShiftModel<f32>,
    base: &EyeSceneParams,
    n_appearance_variants: usize,
    n_gaze_variants: usize,
    seed: u64,
) -> Result<DisentanglementReport, AnalysisError> {
    if n_appearance_variants < 2 {
        return Err(AnalysisError::TooFewVariants(n_appearance_variants));
    }
    if n_gaze_variants < 2 {
        return Err(AnalysisError::TooFewVariants(n_gaze_variants));
    }
    let base_img = render(base)?;
    let mut rng = stream(seed, "appearance_perturb", 0);
    let mut gaze_embs_app = Vec::new();
    let mut app_embs_app = Vec::new();
    for _ in 0..n_appearance_variants {
        let gain = rng.gen_range(0.7..1.3);
        let gamma = rng.gen_range(0.8..1.25);
        let img = photometric_perturb(&base_img, gain, gamma);
        let (g, a) = embed_pair(model, &img)?;
        gaze_embs_app.push(g);
        app_embs_app.push(a);
    }
    let mut rng = stream(seed, "gaze_perturb", 0);
    let mut gaze_embs_gaze = Vec::new();
    let mut app_embs_gaze = Vec::new();
    for _ in 0..n_gaze_variants {
        let mut p = base.clone();
        p.yaw_deg = rng.gen_range(-20.0..20.0);
        p.pitch_deg = rng.gen_range(-20.0..20.0);
        let img = render(&p)?;
        let (g, a) = embed_pair(model, &img)?;
        gaze_embs_gaze.push(g);
        app_embs_gaze.push(a);
    }
    Ok(DisentanglementReport {
        gaze_emb_dist_under_appearance_perturb: mean_pairwise_cosine(&gaze_embs_app),
        appearance_emb_dist_under_appearance_perturb: mean_pairwise_cosine(&app_embs_app),
        gaze_emb_dist_under_gaze_perturb: mean_pairwise_cosine(&gaze_embs_gaze),
        appearance_emb_dist_under_gaze_perturb: mean_pairwise_cosine(&app_embs_gaze),
        centroid_gaze_under_appearance: mean_to_centroid_cosine(&gaze_embs_app),
        centroid_appearance_under_appearance: mean_to_centroid_cosine(&app_embs_app),
        centroid_gaze_under_gaze: mean_to_centroid_cosine(&gaze_embs_gaze),
        centroid_appearance_under_gaze: mean_to_centroid_cosine(&app_embs_gaze),
        stderr_appearance_under_appearance: pairwise_cosine_stderr(&app_embs_app),
        stderr_appearance_under_gaze: pairwise_cosine_stderr(&app_embs_gaze),
        n_appearance_variants,
        n_gaze_variants,
    })
}

/// Probe from precomputed embedding sets (for real datasets where the
/// perturbations come from the data itself).
pub fn disentanglement_from_embeddings(
    gaze_under_app: &[Vec<f64>],
    app_under_app: &[Vec<f64>],
    gaze_under_gaze: &[Vec<f64>],
    app_under_gaze: &[Vec<f64>],
) -> Result<DisentanglementReport, AnalysisError> {
    for set in [gaze_under_app, app_under_app, gaze_under_gaze, app_under_gaze] {
        if set.len() < 2 {
            return Err(AnalysisError::TooFewVariants(set.len()));
        }
    }
    Ok(DisentanglementReport {
        gaze_emb_dist_under_appearance_perturb: mean_pairwise_cosine(gaze_under_app),
        appearance_emb_dist_under_appearance_perturb: mean_pairwise_cosine(app_under_app),
        gaze_emb_dist_under_gaze_perturb: mean_pairwise_cosine(gaze_under_gaze),
        appearance_emb_dist_under_gaze_perturb: mean_pairwise_cosine(app_under_gaze),
        centroid_gaze_under_appearance: mean_to_centroid_cosine(gaze_under_app),
        centroid_appearance_under_appearance: mean_to_centroid_cosine(app_under_app),
        centroid_gaze_under_gaze: mean_to_centroid_cosine(gaze_under_gaze),
        centroid_appearance_under_gaze: mean_to_centroid_cosine(app_under_gaze),
        stderr_appearance_under_appearance: pairwise_cosine_stderr(app_under_app),
        stderr_appearance_under_gaze: pairwise_cosine_stderr(app_under_gaze),
        n_appearance_variants: gaze_under_app.len(),
        n_gaze_variants: gaze_under_gaze.len(),
    })
}

// ---------------------------------------------------------------------------
// Attention-map export
// ---------------------------------------------------------------------------

/// Upsample a grid attention map to image resolution and min-max normalize
/// into [0,1].
pub fn attention_heatmap(attn: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (gh, gw) = attn.dim();
    let mut g = Graph::<f32>::new();
    let a = g.constant(
        attn.clone()
            .into_shape_with_order((1, 1, gh, gw))
            .unwrap()
            .into_dyn(),
    );
    let up = g.resize2d(a, out_h, out_w, ResizeMode::Bilinear);
    let v = g.val(up);
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &x in v.iter() {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    let range = if hi > lo { hi - lo } else { 1.0 };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        (v[[0, 0, y, x]] - lo) / range
    })
}

/// Side-by-side composite of a source image and its heatmap, separated by a
/// 2px mid-gray divider. All values in [0,1].
pub fn compose_side_by_side(source: &GrayImage, heatmap: &Array2<f32>) -> Array2<f32> {
    let (h, w) = source.dim();
    assert_eq!(heatmap.dim(), (h, w));
    let gap = 2;
    let mut out = Array2::<f32>::from_elem((h, 2 * w + gap), 0.5);
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = source[[y, x]];
            out[[y, w + gap + x]] = heatmap[[y, x]];
        }
    }
    out
}

/// Fraction of attention mass inside a {0,1} mask after upsampling.
pub fn attention_mass_in_mask(attn_up: &Array2<f32>, mask: &Array2<f32>) -> f64 {
    assert_eq!(attn_up.dim(), mask.dim());
    let mut inside = 0.0f64;
    let mut total = 0.0f64;
    for (a, m) in attn_up.iter().zip(mask.iter()) {
        total += *a as f64;
        if *m > 0.5 {
            inside += *a as f64;
        }
    }
    if total > 0.0 {
        inside / total
    } else {
        0.0
    }
}

/// Embedding matrix dump (rows = frames) for external projection tools.
#[derive(Debug, Serialize)]
pub struct EmbeddingDump {
    pub subject_ids: Vec<String>,
    pub labels: Vec<Option<(f64, f64)>>,
    pub embeddings: Vec<Vec<f64>>,
}

/// Gaze-format attention map of a model for one source image: runs a
/// self-redirection and returns the grid attention.
pub fn source_attention(
    model: &mut GazeShiftModel<f32>,
    image: &GrayImage,
) -> Result<Array2<f32>, AnalysisError> {
    let x: Array4<f32> = crate::model::normalize_batch(&[image]);
    let (_, attn, _) = model.redirect(&x, &x)?;
    Ok(attn.index_axis(Axis(0), 0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_distance_endpoints() {
        let v = vec![1.0, -2.0, 0.5];
        assert!(cosine_distance(&v, &v) < 1e-12);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_distance(&v, &neg) - 2.0).abs() < 1e-12);
        // symmetry
        let w = vec![0.3, 0.1, -0.7];
        assert_eq!(cosine_distance(&v, &w), cosine_distance(&w, &v));
    }

    #[test]
    fn constant_embeddings_give_zero_distances() {
        let constant = vec![vec![0.5, 0.5]; 10];
        let r = disentanglement_from_embeddings(&constant, &constant, &constant, &constant)
            .unwrap();
        assert!(r.gaze_emb_dist_under_appearance_perturb < 1e-12);
        assert!(r.appearance_emb_dist_under_appearance_perturb < 1e-12);
        assert!(r.gaze_emb_dist_under_gaze_perturb < 1e-12);
        assert!(r.appearance_emb_dist_under_gaze_perturb < 1e-12);
        assert!(r.centroid_gaze_under_gaze < 1e-12);
    }

    #[test]
    fn too_few_variants_is_an_error() {
        let one = vec![vec![1.0]];
        let two = vec![vec![1.0], vec![0.0]];
        assert!(matches!(
            disentanglement_from_embeddings(&one, &two, &two, &two),
            Err(AnalysisError::TooFewVariants(1))
        ));
    }

    #[test]
    fn heatmap_is_normalized_and_composite_shaped() {
        let attn = Array2::from_shape_vec((2, 2), vec![0.1f32, 0.2, 0.3, 0.4]).unwrap();
        let hm = attention_heatmap(&attn, 8, 8);
        let lo = hm.iter().fold(f32::INFINITY, |m, &v| m.min(v));
        let hi = hm.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
        let src = Array2::<f32>::zeros((8, 8));
        let comp = compose_side_by_side(&src, &hm);
        assert_eq!(comp.dim(), (8, 18));
        assert!(comp.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn mass_in_mask_is_a_fraction() {
        let attn = Array2::<f32>::from_elem((4, 4), 1.0);
        let mut mask = Array2::<f32>::zeros((4, 4));
        for y in 0..2 {
            for x in 0..4 {
                mask[[y, x]] = 1.0;
            }
        }
        let f = attention_mass_in_mask(&attn, &mask);
        assert!((f - 0.5).abs() < 1e-12);
    }

    #[test]
    fn photometric_perturb_stays_in_range() {
        let p = EyeSceneParams::centered(48, 48);
        let img = render(&p).unwrap();
        let out = photometric_perturb(&img, 1.3, 0.8);
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // identity transform is exact on the clamped range
        let id = photometric_perturb(&img, 1.0, 1.0);
        for (a, b) in id.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
