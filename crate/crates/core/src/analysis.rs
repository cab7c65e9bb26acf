//! Interpretability measurements over trained attention masks: channel
//! importance, channel and attribute correlations, mask export and
//! localisation against known supports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{upsample_nearest, Tensor};
use crate::dataset::{make_batch, Sample};
use crate::error::{Error, Result};
use crate::network::MultiAttrNet;
use crate::pnm::PnmImage;

const BATCH: usize = 100;

/// Largest localisation ratio reported.
pub const LOCALIZATION_CAP: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub attribute: usize,
    /// Mean mask activation per channel.
    pub scores: Vec<f64>,
}

/// Spatial-mean mask activation for every sample, attribute and channel.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStatistics {
    pub samples: usize,
    pub attributes: usize,
    pub channels: usize,
    /// Indexed `[sample][attribute][channel]`, flattened.
    pub values: Vec<f64>,
}

impl MaskStatistics {
    pub fn get(&self, sample: usize, attribute: usize, channel: usize) -> f64 {
        self.values[(sample * self.attributes + attribute) * self.channels + channel]
    }

    pub fn importance(&self, attribute: usize) -> ImportanceVector {
        let scores = (0..self.channels)
            .map(|c| (0..self.samples).map(|i| self.get(i, attribute, c)).sum::<f64>() / self.samples as f64)
            .collect();
        ImportanceVector { attribute, scores }
    }
}

/// Runs the network once over `samples` and records per-channel mask means.
pub fn mask_statistics(net: &MultiAttrNet, samples: &[Sample]) -> Result<MaskStatistics> {
    if samples.is_empty() {
        return Err(Error::validation("mask statistics need at least one sample"));
    }
    let k_attr = net.num_attributes();
    let c = net.config().feature_channels;
    let mut values = vec![0.0; samples.len() * k_attr * c];
    for (bi, chunk) in samples.chunks(BATCH).enumerate() {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = make_batch(&refs)?;
        let masks = net.masks(&batch.images)?;
        for (k, mask) in masks.masks.iter().enumerate() {
            let &[b, _, h, w] = mask.shape() else { unreachable!("masks are 4-d") };
            let hw = h * w;
            for i in 0..b {
                let sample = bi * BATCH + i;
                for ch in 0..c {
                    let plane = &mask.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    values[(sample * k_attr + k) * c + ch] = plane.iter().sum::<f64>() / hw as f64;
                }
            }
        }
    }
    Ok(MaskStatistics {
        samples: samples.len(),
        attributes: k_attr,
        channels: c,
        values,
    })
}

/// Mean activation of each channel of `M^k` over samples and positions.
pub fn channel_importance(net: &MultiAttrNet, samples: &[Sample], k: usize) -> Result<ImportanceVector> {
    if k >= net.num_attributes() {
        return Err(Error::Index(format!("attribute {k} out of range")));
    }
    Ok(mask_statistics(net, samples)?.importance(k))
}

/// Channel ids by descending score, ties by ascending id.
pub fn top_k_channels(importance: &ImportanceVector, k_top: usize) -> Result<Vec<usize>> {
    let c = importance.scores.len();
    if k_top == 0 || k_top > c {
        return Err(Error::validation(format!("k_top must lie in 1..={c}, got {k_top}")));
    }
    Ok(ranked(&importance.scores).into_iter().take(k_top).collect())
}

fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlate {
    pub label: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    /// Rows of the square matrix.
    pub matrix: Vec<Vec<f64>>,
    /// For each label, its five most correlated other labels, descending.
    pub top5: BTreeMap<String, Vec<Correlate>>,
}

impl CorrelationMatrix {
    /// Pearson matrix between observation vectors; unit diagonal, mirrored upper triangle.
    pub fn from_observations(labels: Vec<String>, observations: &[Vec<f64>]) -> Self {
        let n = observations.len();
        let mut matrix = vec![vec![0.0; n]; n];
        for i in 0..n {
            matrix[i][i] = 1.0;
            for j in i + 1..n {
                let r = pearson(&observations[i], &observations[j]);
                matrix[i][j] = r;
                matrix[j][i] = r;
            }
        }
        let top5 = (0..n)
            .map(|i| {
                let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                others.sort_by(|&a, &b| matrix[i][b].total_cmp(&matrix[i][a]).then(a.cmp(&b)));
                let list = others
                    .into_iter()
                    .take(5)
                    .map(|j| Correlate {
                        label: labels[j].clone(),
                        value: matrix[i][j],
                    })
                    .collect();
                (labels[i].clone(), list)
            })
            .collect();
        Self { labels, matrix, top5 }
    }

    /// Largest violation of symmetry, unit diagonal and the `[-1, 1]` range.
    pub fn invariant_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, row) in self.matrix.iter().enumerate() {
            worst = worst.max((row[i] - 1.0).abs());
            for (j, &v) in row.iter().enumerate() {
                worst = worst.max((v - self.matrix[j][i]).abs());
                worst = worst.max(v.abs() - 1.0);
            }
        }
        worst
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,value\n");
        for (i, row) in self.matrix.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                writeln!(out, "{},{},{v}", self.labels[i], self.labels[j]).expect("string write");
            }
        }
        out
    }

    /// Writes `{stem}.json` and `{stem}.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        Ok(())
    }
}

/// Channel-by-channel correlation of per-sample, per-attribute mask means.
pub fn feature_correlation_from(stats: &MaskStatistics) -> Result<CorrelationMatrix> {
    if stats.samples < 2 {
        return Err(Error::validation("feature correlation needs at least two samples"));
    }
    let obs: Vec<Vec<f64>> = (0..stats.channels)
        .map(|c| {
            (0..stats.samples)
                .flat_map(|i| (0..stats.attributes).map(move |k| (i, k)))
                .map(|(i, k)| stats.get(i, k, c))
                .collect()
        })
        .collect();
    let labels = (0..stats.channels).map(|c| c.to_string()).collect();
    Ok(CorrelationMatrix::from_observations(labels, &obs))
}

/// Attribute-by-attribute correlation of importance vectors.
pub fn attribute_correlation_from(stats: &MaskStatistics, names: &[String]) -> Result<CorrelationMatrix> {
    if stats.samples < 2 {
        return Err(Error::validation("attribute correlation needs at least two samples"));
    }
    if stats.attributes < 2 {
        return Err(Error::validation("attribute correlation needs at least two attributes"));
    }
    if names.len() != stats.attributes {
        return Err(Error::shape(format!("{} names for {} attributes", names.len(), stats.attributes)));
    }
    let obs: Vec<Vec<f64>> = (0..stats.attributes).map(|k| stats.importance(k).scores).collect();
    Ok(CorrelationMatrix::from_observations(names.to_vec(), &obs))
}

pub fn feature_correlation(net: &MultiAttrNet, samples: &[Sample]) -> Result<CorrelationMatrix> {
    if samples.len() < 2 {
        return Err(Error::validation("feature correlation needs at least two samples"));
    }
    feature_correlation_from(&mask_statistics(net, samples)?)
}

pub fn attribute_correlation(net: &MultiAttrNet, samples: &[Sample], names: &[String]) -> Result<CorrelationMatrix> {
    if samples.len() < 2 {
        return Err(Error::validation("attribute correlation needs at least two samples"));
    }
    attribute_correlation_from(&mask_statistics(net, samples)?, names)
}

/// `attribute,channel,score` rows, by attribute then descending score.
pub fn importance_csv(importances: &[ImportanceVector], names: &[String]) -> String {
    let mut out = String::from("attribute,channel,score\n");
    for imp in importances {
        let name = names.get(imp.attribute).cloned().unwrap_or_else(|| imp.attribute.to_string());
        for c in ranked(&imp.scores) {
            writeln!(out, "{name},{c},{}", imp.scores[c]).expect("string write");
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskIndexEntry {
    pub channel: usize,
    pub file: String,
    pub min: f64,
    pub max: f64,
}

/// Writes each channel of `M^k` for one sample as a PGM upsampled to the
/// input resolution, min-max normalised per channel (constant channels map
/// to mid-gray), plus `attr{k}_index.json` with the raw ranges.
pub fn export_masks(net: &MultiAttrNet, sample: &Sample, k: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if k >= net.num_attributes() {
        return Err(Error::Index(format!("attribute {k} out of range")));
    }
    fs::create_dir_all(out_dir)?;
    let batch = make_batch(&[sample])?;
    let feat = net.extract_features(&batch.images)?;
    let mask = net.generate_mask(k, &feat)?;
    let &[_, c, h, w] = mask.shape() else { unreachable!("masks are 4-d") };
    let factor = net.config().image_size / h;
    let up = upsample_nearest(mask.data(), c, h, w, factor);
    let (hu, wu) = (h * factor, w * factor);
    let mut paths = Vec::with_capacity(c);
    let mut index = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = &up[ch * hu * wu..(ch + 1) * hu * wu];
        let min = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let max = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let norm: Vec<f64> = if max > min {
            plane.iter().map(|v| (v - min) / (max - min)).collect()
        } else {
            vec![0.5; plane.len()]
        };
        let file = format!("attr{k}_ch{ch}.pgm");
        let path = out_dir.join(&file);
        PnmImage::from_tensor(&Tensor::new(vec![1, hu, wu], norm)?)?.write(&path)?;
        paths.push(path);
        index.push(MaskIndexEntry { channel: ch, file, min, max });
    }
    fs::write(out_dir.join(format!("attr{k}_index.json")), serde_json::to_string_pretty(&index)?)?;
    Ok(paths)
}

/// Pixelwise maximum over channels, `[H, W]` per sample, at image resolution.
fn channel_max_upsampled(mask: &Tensor, sample: usize, factor: usize) -> Vec<f64> {
    let &[_, c, h, w] = mask.shape() else { unreachable!("masks are 4-d") };
    let hw = h * w;
    let base = sample * c * hw;
    let maxed: Vec<f64> = (0..hw)
        .map(|p| (0..c).map(|ch| mask.data()[base + ch * hw + p]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    upsample_nearest(&maxed, 1, h, w, factor)
}

/// Running in-support / out-of-support activation sums.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SupportRatio {
    inside: f64,
    n_in: usize,
    outside: f64,
    n_out: usize,
}

impl SupportRatio {
    pub fn add(&mut self, activation: &[f64], support: &[bool]) -> Result<()> {
        if activation.len() != support.len() {
            return Err(Error::shape("support bitmap does not match activation size"));
        }
        for (&a, &inside) in activation.iter().zip(support) {
            if inside {
                self.inside += a;
                self.n_in += 1;
            } else {
                self.outside += a;
                self.n_out += 1;
            }
        }
        Ok(())
    }

    /// Mean inside over mean outside, capped at [`LOCALIZATION_CAP`].
    pub fn ratio(&self) -> f64 {
        let mean_in = self.inside / self.n_in.max(1) as f64;
        let mean_out = self.outside / self.n_out.max(1) as f64;
        if self.n_out == 0 || mean_out <= 0.0 {
            return LOCALIZATION_CAP;
        }
        (mean_in / mean_out).min(LOCALIZATION_CAP)
    }
}

/// Mean channel-max activation inside attribute `k`'s support over the mean
/// outside it, pooled over positive samples and capped at [`LOCALIZATION_CAP`].
pub fn localization_score(net: &MultiAttrNet, samples: &[Sample], k: usize) -> Result<f64> {
    if k >= net.num_attributes() {
        return Err(Error::Index(format!("attribute {k} out of range")));
    }
    let positives: Vec<&Sample> = samples.iter().filter(|s| s.labels.get(k) == Some(&1)).collect();
    if positives.is_empty() {
        return Err(Error::validation(format!("no positive samples for attribute {k}")));
    }
    if positives.iter().any(|s| s.supports.is_none()) {
        return Err(Error::validation("localization needs samples with supports"));
    }
    let mut acc = SupportRatio::default();
    for chunk in positives.chunks(BATCH) {
        let batch = make_batch(chunk)?;
        let feat = net.extract_features(&batch.images)?;
        let mask = net.generate_mask(k, &feat)?;
        let factor = net.config().image_size / mask.shape()[2];
        for (i, s) in chunk.iter().enumerate() {
            let support = &s.supports.as_ref().expect("checked")[k];
            acc.add(&channel_max_upsampled(&mask, i, factor), support)?;
        }
    }
    Ok(acc.ratio())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetConfig;
    use proptest::prelude::*;

    fn net() -> MultiAttrNet {
        MultiAttrNet::init_params(NetConfig {
            image_size: 8,
            feature_channels: 4,
            num_attributes: 3,
            head_hidden: 2,
            seed: 5,
            ..NetConfig::desk()
        })
        .unwrap()
    }

    fn samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let data = (0..64).map(|p| ((p * 5 + i * 11) % 13) as f64 / 12.0).collect();
                let mut s = Sample::from_raw(Tensor::new(vec![1, 8, 8], data).unwrap(), vec![1, (i % 2) as u8, 0]).unwrap();
                let left: Vec<bool> = (0..64).map(|p| p % 8 < 4).collect();
                s.supports = Some(vec![left.clone(), left, vec![false; 64]]);
                s
            })
            .collect()
    }

    fn flatten_projection(net: &mut MultiAttrNet, k: usize) {
        let idx = net.param_index(&format!("maskgen{k}.project.kernel")).unwrap();
        let shape = net.params()[idx].value.shape().to_vec();
        net.params_mut()[idx].value = Tensor::zeros(&shape);
    }

    #[test]
    fn constant_mask_gives_half_everywhere() {
        let mut n = net();
        flatten_projection(&mut n, 1);
        let imp = channel_importance(&n, &samples(3), 1).unwrap();
        assert_eq!(imp.scores, vec![0.5; 4]);
        assert_eq!(localization_score(&n, &samples(4), 1).unwrap(), 1.0);
    }

    #[test]
    fn importance_is_a_mean() {
        let n = net();
        let s = samples(5);
        let imp = channel_importance(&n, &s, 0).unwrap();
        assert_eq!(imp.scores.len(), 4);
        assert!(imp.scores.iter().all(|&v| v > 0.0 && v < 1.0));
        let doubled: Vec<Sample> = s.iter().chain(&s).cloned().collect();
        let reversed: Vec<Sample> = s.iter().rev().cloned().collect();
        for other in [doubled, reversed] {
            let again = channel_importance(&n, &other, 0).unwrap();
            for (a, b) in imp.scores.iter().zip(&again.scores) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        assert!(channel_importance(&n, &[], 0).is_err());
        assert!(channel_importance(&n, &s, 3).is_err());
    }

    fn imp(scores: &[f64]) -> ImportanceVector {
        ImportanceVector {
            attribute: 0,
            scores: scores.to_vec(),
        }
    }

    #[test]
    fn top_channels_order_and_ties() {
        assert_eq!(top_k_channels(&imp(&[0.1, 0.9, 0.5]), 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k_channels(&imp(&[0.3; 4]), 3).unwrap(), vec![0, 1, 2]);
        let mut all = top_k_channels(&imp(&[0.2, 0.7, 0.1, 0.7]), 4).unwrap();
        assert_eq!(all, vec![1, 3, 0, 2]);
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(top_k_channels(&imp(&[0.1]), 0).is_err());
        assert!(top_k_channels(&imp(&[0.1]), 2).is_err());
    }

    #[test]
    fn pearson_cases() {
        let v = [0.3, 1.2, -0.4, 2.0];
        assert!((pearson(&v, &v) - 1.0).abs() < 1e-15);
        let affine: Vec<f64> = v.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((pearson(&v, &affine) - 1.0).abs() < 1e-12);
        // centred [-1, 0, 1] against [1, 0, -1]: -2 / sqrt(2 * 2)
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]), 0.0);
    }

    #[test]
    fn correlation_invariants_and_duplicates() {
        let mut n = net();
        n.copy_mask_generator(0, 2).unwrap();
        let s = samples(6);
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let attr = attribute_correlation(&n, &s, &names).unwrap();
        assert!(attr.invariant_error() <= 1e-9);
        assert!((attr.matrix[0][2] - 1.0).abs() <= 1e-9);
        assert_eq!(attr.top5["a"][0].label, "c");
        assert_eq!(attr.top5["a"].len(), 2);
        let feat = feature_correlation(&n, &s).unwrap();
        assert_eq!(feat.matrix.len(), 4);
        assert!(feat.invariant_error() <= 1e-9);
        assert!(feature_correlation(&n, &s[..1]).is_err());
        assert!(attribute_correlation(&n, &s[..1], &names).is_err());
        let csv = attr.to_csv();
        assert_eq!(csv.lines().count(), 1 + 9);
    }

    #[test]
    fn zero_variance_channel_correlates_as_zero() {
        let m = CorrelationMatrix::from_observations(
            vec!["x".into(), "y".into()],
            &[vec![0.5, 0.5, 0.5], vec![0.1, 0.4, 0.2]],
        );
        assert_eq!(m.matrix, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn exported_masks() {
        let dir = tempfile::tempdir().unwrap();
        let mut n = net();
        flatten_projection(&mut n, 2);
        let s = &samples(1)[0];
        let files = export_masks(&n, s, 2, dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        for f in &files {
            let img = PnmImage::read(f).unwrap();
            assert_eq!((img.width, img.height), (8, 8));
            assert!(img.samples.iter().all(|&v| v == 128));
        }
        let free = export_masks(&n, s, 0, dir.path()).unwrap();
        assert_eq!(free[3].file_name().unwrap(), "attr0_ch3.pgm");
        let index: Vec<MaskIndexEntry> =
            serde_json::from_str(&fs::read_to_string(dir.path().join("attr0_index.json")).unwrap()).unwrap();
        assert_eq!(index.len(), 4);
        assert!(index.iter().all(|e| e.min <= e.max));
    }

    #[test]
    fn localization_extremes_and_determinism() {
        let support = [true, true, false, false];
        let mut perfect = SupportRatio::default();
        perfect.add(&[1.0, 1.0, 0.0, 0.0], &support).unwrap();
        assert_eq!(perfect.ratio(), LOCALIZATION_CAP);
        let mut flat = SupportRatio::default();
        flat.add(&[0.3; 4], &support).unwrap();
        assert_eq!(flat.ratio(), 1.0);
        assert!(flat.add(&[0.3; 3], &support).is_err());

        let n = net();
        let s = samples(4);
        let a = localization_score(&n, &s, 0).unwrap();
        assert_eq!(a, localization_score(&n, &s, 0).unwrap());
        assert!(a > 0.0);
        assert!(matches!(localization_score(&n, &s, 2), Err(Error::Validation(_))));
    }

    #[test]
    fn importance_csv_layout() {
        let csv = importance_csv(&[imp(&[0.1, 0.9])], &["circle".into()]);
        assert_eq!(csv, "attribute,channel,score\ncircle,1,0.9\ncircle,0,0.1\n");
    }

    proptest! {
        #[test]
        fn top_k_stable_under_smaller_appended_channels(
            scores in proptest::collection::vec(0.5f64..1.0, 1..10),
            extra in proptest::collection::vec(0.0f64..0.49, 0..5),
            k_frac in 0.0f64..1.0,
        ) {
            let k_top = 1 + ((scores.len() - 1) as f64 * k_frac) as usize;
            let base = top_k_channels(&imp(&scores), k_top).unwrap();
            let longer: Vec<f64> = scores.iter().chain(&extra).copied().collect();
            prop_assert_eq!(base, top_k_channels(&imp(&longer), k_top).unwrap());
        }

        #[test]
        fn correlation_matrix_invariants(obs in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 6), 2..6)) {
            let labels = (0..obs.len()).map(|i| i.to_string()).collect();
            let m = CorrelationMatrix::from_observations(labels, &obs);
            prop_assert!(m.invariant_error() <= 1e-9);
        }
    }
}
