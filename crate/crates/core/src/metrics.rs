//! Image, flow and depth quality measures.

use std::fmt::Write as _;

use serde::Serialize;

use crate::dataset::Views;
use crate::error::{Error, Result};
use crate::formats::Image;
use crate::geometry::Bounds;
use crate::model::{render_view, SceneField};
use crate::synth::{render_oracle_flow, AnalyticScene, FlowDir};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair(a: &Image, b: &Image, mask: Option<&Image>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Validation(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    if let Some(m) = mask {
        if m.width != a.width || m.height != a.height || m.channels != 1 {
            return Err(Error::Validation("mask must be a single-channel map of the image size".into()));
        }
    }
    Ok(())
}

fn selected(mask: Option<&Image>, pixel: usize) -> bool {
    mask.is_none_or(|m| m.data[pixel] > 0.5)
}

/// Mean squared error over the selected pixels and all channels.
pub fn mse(a: &Image, b: &Image, mask: Option<&Image>) -> Result<f64> {
    check_pair(a, b, mask)?;
    let c = a.channels;
    let (mut sum, mut n) = (0.0, 0usize);
    for p in 0..a.width * a.height {
        if selected(mask, p) {
            for k in p * c..(p + 1) * c {
                sum += (a.data[k] - b.data[k]).powi(2);
            }
            n += c;
        }
    }
    if n == 0 {
        return Err(Error::Domain("mask selects no pixels".into()));
    }
    Ok(sum / n as f64)
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image, mask: Option<&Image>) -> Result<f64> {
    let m = mse(a, b, mask)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|k| (-0.5 * (k * k) as f64 / (SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mirror index into `0..n` (edge pixel repeated).
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian filter of one channel plane with mirrored borders.
fn blur(plane: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, &kw) in kernel.iter().enumerate() {
                s += kw * plane[y * w + mirror(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, &kw) in kernel.iter().enumerate() {
                s += kw * tmp[mirror(y as isize + k as isize - r, h) * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Per-pixel SSIM map averaged over channels.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Vec<f64>> {
    check_pair(a, b, None)?;
    let (w, h, c) = (a.width, a.height, a.channels);
    let kernel = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut map = vec![0.0; w * h];
    for ch in 0..c {
        let pa = a.channel(ch).data;
        let pb = b.channel(ch).data;
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mu_a = blur(&pa, w, h, &kernel);
        let mu_b = blur(&pb, w, h, &kernel);
        let aa = blur(&prod(&pa, &pa), w, h, &kernel);
        let bb = blur(&prod(&pb, &pb), w, h, &kernel);
        let ab = blur(&prod(&pa, &pb), w, h, &kernel);
        for p in 0..w * h {
            let (ma, mb) = (mu_a[p], mu_b[p]);
            let va = aa[p] - ma * ma;
            let vb = bb[p] - mb * mb;
            let cov = ab[p] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            map[p] += num / den / c as f64;
        }
    }
    Ok(map)
}

/// Single-scale SSIM (11x11 Gaussian window, sigma 1.5), the map
/// averaged over selected pixels.
pub fn ssim(a: &Image, b: &Image, mask: Option<&Image>) -> Result<f64> {
    check_pair(a, b, mask)?;
    let map = ssim_map(a, b)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, v) in map.iter().enumerate() {
        if selected(mask, p) {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Domain("mask selects no pixels".into()));
    }
    Ok(sum / n as f64)
}

/// Endpoint errors of per-pixel vectors (any channel count) over a mask.
pub fn endpoint_errors(pred: &Image, gt: &Image, mask: Option<&Image>) -> Result<Vec<f64>> {
    check_pair(pred, gt, mask)?;
    let c = pred.channels;
    Ok((0..pred.width * pred.height)
        .filter(|&p| selected(mask, p))
        .map(|p| {
            (p * c..(p + 1) * c)
                .map(|k| (pred.data[k] - gt.data[k]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Mean endpoint error.
pub fn flow_epe(pred: &Image, gt: &Image, mask: Option<&Image>) -> Result<f64> {
    let e = endpoint_errors(pred, gt, mask)?;
    if e.is_empty() {
        return Err(Error::Domain("mask selects no pixels".into()));
    }
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// RMSE after the least-squares scale and shift of `pred` onto `gt`.
pub fn depth_rmse_aligned(pred: &Image, gt: &Image, mask: Option<&Image>) -> Result<f64> {
    check_pair(pred, gt, mask)?;
    if pred.channels != 1 {
        return Err(Error::Validation("depth maps have one channel".into()));
    }
    let pairs: Vec<(f64, f64)> = (0..pred.data.len())
        .filter(|&p| selected(mask, p))
        .map(|p| (pred.data[p], gt.data[p]))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Domain("mask selects no pixels".into()));
    }
    let n = pairs.len() as f64;
    let mp = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mg = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mp).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mp) * (p.1 - mg)).sum();
    let scale = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let shift = mg - scale * mp;
    let sse: f64 = pairs.iter().map(|p| (scale * p.0 + shift - p.1).powi(2)).sum();
    Ok((sse / n).sqrt())
}

/// Scores of one rendered view.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewScores {
    pub view: usize,
    pub frame: usize,
    pub psnr_full: f64,
    pub ssim_full: f64,
    /// Absent when the view has no dynamic pixels.
    pub psnr_dynamic: Option<f64>,
    pub ssim_dynamic: Option<f64>,
    pub flow_epe: Option<f64>,
    pub depth_rmse_aligned: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub views: Vec<ViewScores>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl EvalReport {
    /// Mean of every column over the views where it is defined.
    pub fn aggregate(&self) -> [Option<f64>; 6] {
        let v = &self.views;
        [
            mean_of(v.iter().map(|s| Some(s.psnr_full))),
            mean_of(v.iter().map(|s| Some(s.ssim_full))),
            mean_of(v.iter().map(|s| s.psnr_dynamic)),
            mean_of(v.iter().map(|s| s.ssim_dynamic)),
            mean_of(v.iter().map(|s| s.flow_epe)),
            mean_of(v.iter().map(|s| s.depth_rmse_aligned)),
        ]
    }

    /// One row per view followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("view,frame,psnr_full,ssim_full,psnr_dynamic,ssim_dynamic,flow_epe,depth_rmse_aligned\n");
        for s in &self.views {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                s.view,
                s.frame,
                cell(Some(s.psnr_full)),
                cell(Some(s.ssim_full)),
                cell(s.psnr_dynamic),
                cell(s.ssim_dynamic),
                cell(s.flow_epe),
                cell(s.depth_rmse_aligned)
            );
        }
        let a = self.aggregate();
        let _ = writeln!(
            out,
            "mean,,{}",
            a.iter().map(|&v| cell(v)).collect::<Vec<_>>().join(",")
        );
        out
    }
}

/// How views are rendered and scored.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Midpoint samples per ray of the evaluated render.
    pub samples: usize,
    /// Oracle samples per ray for the ground-truth scene flow.
    pub oracle_samples: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            samples: 128,
            oracle_samples: 1024,
        }
    }
}

fn masked_or_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Domain(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Ground-truth volume-rendered scene flow of one view, the forward flow
/// for every frame but the last.
pub fn scene_flow_map(
    scene: &AnalyticScene,
    views: &Views,
    view: usize,
    bounds: Bounds<f64>,
    n_fine: usize,
) -> Result<(Image, FlowDir)> {
    let frame = views.frames[view];
    let dir = if frame + 1 < scene.frame_count {
        FlowDir::Forward
    } else {
        FlowDir::Backward
    };
    let flow = render_oracle_flow(scene, &views.cameras[view], frame as f64, bounds, n_fine, dir)?;
    Ok((flow, dir))
}

/// Scores every view of `views`. Dynamic-region scores use the views'
/// masks; flow errors need the analytic scene and are measured inside
/// the mask against [`scene_flow_map`].
pub fn evaluate(
    scene: &dyn SceneField,
    views: &Views,
    bounds: Bounds<f64>,
    gt_scene: Option<&AnalyticScene>,
    spec: &EvalSpec,
) -> Result<EvalReport> {
    let mut out = Vec::with_capacity(views.len());
    for k in 0..views.len() {
        let frame = views.frames[k];
        let r = render_view(scene, &views.cameras[k], frame as f64, bounds, spec.samples)?;
        let gt = &views.images[k];
        let mask = views.masks.get(k);
        let flow_epe = match gt_scene {
            Some(s) => {
                let (gt_flow, dir) = scene_flow_map(s, views, k, bounds, spec.oracle_samples)?;
                let pred = match dir {
                    FlowDir::Forward => &r.flow_fwd,
                    FlowDir::Backward => &r.flow_bwd,
                };
                masked_or_none(flow_epe(pred, &gt_flow, mask))?
            }
            None => None,
        };
        let depth_rmse = match views.depth.get(k) {
            Some(d) => Some(depth_rmse_aligned(&r.depth, d, None)?),
            None => None,
        };
        out.push(ViewScores {
            view: k,
            frame,
            psnr_full: psnr(&r.image, gt, None)?,
            ssim_full: ssim(&r.image, gt, None)?,
            psnr_dynamic: match mask {
                Some(m) => masked_or_none(psnr(&r.image, gt, Some(m)))?,
                None => None,
            },
            ssim_dynamic: match mask {
                Some(m) => masked_or_none(ssim(&r.image, gt, Some(m)))?,
                None => None,
            },
            flow_epe,
            depth_rmse_aligned: depth_rmse,
        });
    }
    Ok(EvalReport { views: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
        Image::new(w, h, c, (0..w * h * c).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 16, 16, 3);
        assert_eq!(psnr(&a, &a, None).unwrap(), PSNR_CAP);
        let shifted = Image {
            data: a.data.iter().map(|v| v + 0.1).collect(),
            ..a.clone()
        };
        assert!((psnr(&a, &shifted, None).unwrap() - 20.0).abs() < 1e-9);
        let zeros = Image::zeros(4, 4, 1);
        let ones = Image { data: vec![1.0; 16], ..zeros.clone() };
        assert_eq!(psnr(&zeros, &ones, None).unwrap(), 0.0);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 32, 32, 3);
        let noise: Vec<f64> = (0..a.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for level in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let b = Image {
                data: a.data.iter().zip(&noise).map(|(v, n)| v + level * n).collect(),
                ..a.clone()
            };
            let p = psnr(&a, &b, None).unwrap();
            assert!(p < last);
            assert_eq!(p, psnr(&b, &a, None).unwrap());
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 20, 17, 3);
        let b = random_image(&mut rng, 20, 17, 3);
        assert_eq!(ssim(&a, &a, None).unwrap(), 1.0);
        assert_eq!(ssim(&a, &b, None).unwrap(), ssim(&b, &a, None).unwrap());
        let mask = Image::new(20, 17, 1, (0..340).map(|k| f64::from(u8::from(k % 3 == 0))).collect()).unwrap();
        assert_eq!(ssim(&a, &b, Some(&mask)).unwrap(), ssim(&b, &a, Some(&mask)).unwrap());
    }

    #[test]
    fn ssim_of_checkerboard_and_its_inverse_is_negative() {
        let w = 16;
        let a = Image::new(w, w, 1, (0..w * w).map(|k| ((k / w + k % w) % 2) as f64).collect()).unwrap();
        let inv = Image {
            data: a.data.iter().map(|v| 1.0 - v).collect(),
            ..a.clone()
        };
        let s = ssim(&a, &inv, None).unwrap();
        assert!((-1.0..0.0).contains(&s), "{s}");
        // direct formula at one interior pixel
        let map = ssim_map(&a, &inv).unwrap();
        let k = gaussian_kernel();
        let (x0, y0) = (8usize, 8usize);
        let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for dy in 0..11 {
            for dx in 0..11 {
                let wgt = k[dx] * k[dy];
                let (x, y) = (x0 + dx - 5, y0 + dy - 5);
                let (u, v) = (a.get(x, y, 0), inv.get(x, y, 0));
                ma += wgt * u;
                mb += wgt * v;
                aa += wgt * u * u;
                bb += wgt * v * v;
                ab += wgt * u * v;
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let expect = (2.0 * ma * mb + c1) * (2.0 * (ab - ma * mb) + c2)
            / ((ma * ma + mb * mb + c1) * (aa - ma * ma + bb - mb * mb + c2));
        assert!((map[y0 * w + x0] - expect).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images_reduce_to_luminance_term() {
        let a = Image { data: vec![0.4; 144], ..Image::zeros(12, 12, 1) };
        let b = Image { data: vec![0.5; 144], ..a.clone() };
        let c1 = 1e-4;
        let expect = (2.0 * 0.4 * 0.5 + c1) / (0.16 + 0.25 + c1);
        assert!((ssim(&a, &b, None).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn masking_ignores_excluded_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_image(&mut rng, 8, 8, 3);
        let mut b = random_image(&mut rng, 8, 8, 3);
        let mask = Image::new(8, 8, 1, (0..64).map(|k| f64::from(u8::from(k < 20))).collect()).unwrap();
        let before = psnr(&a, &b, Some(&mask)).unwrap();
        for v in &mut b.data[60..] {
            *v = 0.0;
        }
        assert_eq!(before, psnr(&a, &b, Some(&mask)).unwrap());
        assert!(psnr(&a, &b, Some(&Image::zeros(8, 8, 1))).is_err());
    }

    #[test]
    fn endpoint_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_image(&mut rng, 6, 5, 3);
        assert_eq!(flow_epe(&g, &g, None).unwrap(), 0.0);
        let off = Image {
            data: g.data.iter().enumerate().map(|(k, v)| if k % 3 == 1 { v + 1.0 } else { *v }).collect(),
            ..g.clone()
        };
        assert!((flow_epe(&off, &g, None).unwrap() - 1.0).abs() < 1e-12);
        let p = random_image(&mut rng, 6, 5, 3);
        let mut naive = 0.0;
        for k in 0..30 {
            let d: f64 = (0..3).map(|c| (p.data[3 * k + c] - g.data[3 * k + c]).powi(2)).sum();
            naive += d.sqrt();
        }
        assert!((flow_epe(&p, &g, None).unwrap() - naive / 30.0).abs() < 1e-12);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn aligned_depth_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = Image::new(9, 7, 1, (0..63).map(|_| rng.random_range(1.0..5.0)).collect()).unwrap();
        let p = Image { data: g.data.iter().map(|v| 2.0 * v + 3.0).collect(), ..g.clone() };
        assert!(depth_rmse_aligned(&p, &g, None).unwrap() < 1e-9);
        assert_eq!(depth_rmse_aligned(&g, &g, None).unwrap(), 0.0);
        let noisy = Image {
            data: g.data.iter().map(|v| 0.5 * v + rng.random_range(-0.3..0.3)).collect(),
            ..g.clone()
        };
        // normal equations [sum x^2, sum x; sum x, n] [s; b] = [sum xy; sum y]
        let n = 63.0;
        let (sx, sy) = (noisy.data.iter().sum::<f64>(), g.data.iter().sum::<f64>());
        let sxx: f64 = noisy.data.iter().map(|x| x * x).sum();
        let sxy: f64 = noisy.data.iter().zip(&g.data).map(|(x, y)| x * y).sum();
        let det = sxx * n - sx * sx;
        let s = (sxy * n - sx * sy) / det;
        let b = (sxx * sy - sx * sxy) / det;
        let rmse = (noisy.data.iter().zip(&g.data).map(|(x, y)| (s * x + b - y).powi(2)).sum::<f64>() / n).sqrt();
        assert!((depth_rmse_aligned(&noisy, &g, None).unwrap() - rmse).abs() < 1e-9);
    }

    #[test]
    fn report_csv_has_header_rows_and_mean() {
        let r = EvalReport {
            views: vec![
                ViewScores {
                    view: 0,
                    frame: 0,
                    psnr_full: 30.0,
                    ssim_full: 0.9,
                    psnr_dynamic: None,
                    ssim_dynamic: None,
                    flow_epe: Some(0.5),
                    depth_rmse_aligned: Some(0.1),
                },
                ViewScores {
                    view: 1,
                    frame: 1,
                    psnr_full: 20.0,
                    ssim_full: 0.7,
                    psnr_dynamic: Some(18.0),
                    ssim_dynamic: Some(0.6),
                    flow_epe: Some(1.5),
                    depth_rmse_aligned: Some(0.3),
                },
            ],
        };
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "0,0,30.000000,0.900000,,,0.500000,0.100000");
        assert_eq!(lines[3], "mean,,25.000000,0.800000,18.000000,0.600000,1.000000,0.200000");
    }
}
