//! File formats: CSV clouds and flows, flat key-value configs, and JSON
//! run reports.
//!
//! Floats are emitted with 17 significant digits so every write/read round
//! trip reproduces the value bit-exactly; row order defines point index.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::cloud::{FlowField, PointCloud};
use crate::error::{Error, Result};
use crate::flowmodel::{FitConfig, LossRecord, ModelKind, Preset};
use crate::losses::SmoothKind;
use crate::metrics::Metrics;
use crate::normals::NormalField;

const CLOUD_HEADER: &str = "x,y,z";
const FLOW_HEADER: &str = "fx,fy,fz";
const NORMALS_HEADER: &str = "nx,ny,nz";
const BODY_ID_HEADER: &str = "body_id";

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let rows = read_vec3_csv(path, CLOUD_HEADER)?;
    PointCloud::new(rows)
}

pub fn write_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    write_vec3_csv(cloud.points(), CLOUD_HEADER, path)
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let rows = read_vec3_csv(path, FLOW_HEADER)?;
    FlowField::new(rows)
}

pub fn write_flow(flow: &FlowField, path: &Path) -> Result<()> {
    write_vec3_csv(flow.vectors(), FLOW_HEADER, path)
}

/// Invalid normals are written as the zero vector, mirroring their
/// contribution to descriptors.
pub fn write_normals(normals: &NormalField, path: &Path) -> Result<()> {
    let rows: Vec<Vector3<f64>> = (0..normals.len()).map(|i| normals.get_or_zero(i)).collect();
    write_vec3_csv(&rows, NORMALS_HEADER, path)
}

pub fn write_body_ids(ids: &[u32], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(ids.len() * 4 + 16);
    out.push_str(BODY_ID_HEADER);
    out.push('\n');
    for id in ids {
        let _ = writeln!(out, "{id}");
    }
    write_file(path, &out)
}

fn write_vec3_csv(rows: &[Vector3<f64>], header: &str, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 72 + 8);
    out.push_str(header);
    out.push('\n');
    for v in rows {
        let _ = writeln!(out, "{},{},{}", fmt_f64(v.x), fmt_f64(v.y), fmt_f64(v.z));
    }
    write_file(path, &out)
}

/// 17 significant digits: enough for an exact f64 round trip.
fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn read_vec3_csv(path: &Path, header: &str) -> Result<Vec<Vector3<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        context: "read",
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim_end() == header => {}
        Some((_, first)) => {
            return Err(parse_err(
                path,
                1,
                format!("expected header `{header}`, found `{}`", first.trim_end()),
            ))
        }
        None => return Err(parse_err(path, 1, format!("missing header `{header}`"))),
    }

    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 3 fields, found {}", fields.len()),
            ));
        }
        let mut v = [0.0f64; 3];
        for (c, field) in fields.iter().enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| {
                parse_err(path, line_no, format!("cannot parse `{}` as a number", field.trim()))
            })?;
            if !value.is_finite() {
                return Err(parse_err(path, line_no, format!("non-finite value `{value}`")));
            }
            v[c] = value;
        }
        rows.push(Vector3::new(v[0], v[1], v[2]));
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no data rows".to_string()));
    }
    Ok(rows)
}

fn parse_err(path: &Path, line: usize, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|source| Error::Io {
                context: "create directory for",
                path: path.to_path_buf(),
                source,
            })?;
        }
    }
    std::fs::write(path, contents).map_err(|source| Error::Io {
        context: "write",
        path: path.to_path_buf(),
        source,
    })
}

/// Summary of a fit's loss trajectory for the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossSummary {
    pub iterations: usize,
    pub converged: bool,
    pub best_iteration: usize,
    pub initial: LossRecord,
    #[serde(rename = "final")]
    pub last: LossRecord,
    pub best: LossRecord,
}

/// Structured run report. `runtime_seconds` is `null` in deterministic
/// mode so byte-identical runs produce byte-identical reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub seed: Option<u64>,
    pub source: Option<String>,
    pub target: Option<String>,
    pub config: Option<FitConfig>,
    pub loss: Option<LossSummary>,
    pub metrics: Option<Metrics>,
    pub runtime_seconds: Option<f64>,
}

pub fn report_to_string(report: &Report) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    let mut text = report_to_string(report)?;
    text.push('\n');
    write_file(path, &text)
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        context: "read",
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads a flat `key: value` config file whose keys mirror [`FitConfig`].
/// Lines starting with `#` are comments. A `preset` key rebases the
/// defaults before any other key applies; unknown keys are an error so
/// typos do not silently fall back to defaults.
pub fn read_config(path: &Path) -> Result<FitConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        context: "read",
        path: path.to_path_buf(),
        source,
    })?;

    let mut entries: Vec<(usize, String, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            return Err(parse_err(path, line_no, "expected `key: value`".to_string()));
        };
        entries.push((line_no, key.trim().to_string(), value.trim().to_string()));
    }

    let mut cfg = FitConfig::default();
    for (line_no, key, value) in &entries {
        if key == "preset" {
            cfg = FitConfig::from_preset(parse_preset(path, *line_no, value)?);
        }
    }
    for (line_no, key, value) in &entries {
        apply_config_key(&mut cfg, path, *line_no, key, value)?;
    }
    Ok(cfg)
}

fn apply_config_key(
    cfg: &mut FitConfig,
    path: &Path,
    line: usize,
    key: &str,
    value: &str,
) -> Result<()> {
    match key {
        "preset" => {} // applied in the first pass
        "model" => {
            cfg.model = match value {
                "direct" => ModelKind::Direct,
                "coordnet" => ModelKind::CoordNet,
                other => {
                    return Err(parse_err(
                        path,
                        line,
                        format!("model must be `direct` or `coordnet`, got `{other}`"),
                    ))
                }
            }
        }
        "smooth_kind" => {
            cfg.smooth_kind = match value {
                "surf" => SmoothKind::Surf,
                "knn" => SmoothKind::Knn,
                other => {
                    return Err(parse_err(
                        path,
                        line,
                        format!("smooth_kind must be `surf` or `knn`, got `{other}`"),
                    ))
                }
            }
        }
        "hidden_layers" => cfg.hidden_layers = parse_num(path, line, key, value)?,
        "hidden_width" => cfg.hidden_width = parse_num(path, line, key, value)?,
        "max_iters" => cfg.max_iters = parse_num(path, line, key, value)?,
        "patience" => cfg.patience = parse_num(path, line, key, value)?,
        "k" => cfg.k = parse_num(path, line, key, value)?,
        "k_n" => cfg.k_n = parse_num(path, line, key, value)?,
        "cyc_refresh_every" => cfg.cyc_refresh_every = parse_num(path, line, key, value)?,
        "seed" => cfg.seed = parse_num(path, line, key, value)?,
        "convergence_tol" => cfg.convergence_tol = parse_num(path, line, key, value)?,
        "learning_rate" => cfg.learning_rate = parse_num(path, line, key, value)?,
        "alpha_surf" => cfg.alpha_surf = parse_num(path, line, key, value)?,
        "alpha_cyc" => cfg.alpha_cyc = parse_num(path, line, key, value)?,
        "normal_scale" => cfg.normal_scale = parse_num(path, line, key, value)?,
        other => {
            return Err(Error::UnknownConfigKey {
                path: path.to_path_buf(),
                line,
                key: other.to_string(),
            })
        }
    }
    Ok(())
}

fn parse_preset(path: &Path, line: usize, value: &str) -> Result<Preset> {
    match value {
        "stereo" => Ok(Preset::Stereo),
        "lidar" => Ok(Preset::Lidar),
        other => Err(parse_err(
            path,
            line,
            format!("preset must be `stereo` or `lidar`, got `{other}`"),
        )),
    }
}

fn parse_num<T: std::str::FromStr>(
    path: &Path,
    line: usize,
    key: &str,
    value: &str,
) -> Result<T> {
    value.parse().map_err(|_| {
        parse_err(path, line, format!("cannot parse `{value}` for key `{key}`"))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    #[test]
    fn cloud_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cloud.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = PointCloud::new(
            (0..64)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(-10.0..10.0) / 3.0,
                        rng.gen::<f64>() * 1e-7,
                    )
                })
                .collect(),
        )
        .unwrap();
        write_cloud(&cloud, &path).unwrap();
        let back = read_cloud(&path).unwrap();
        assert_eq!(cloud, back);
    }

    #[test]
    fn file_order_defines_index() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.csv");
        std::fs::write(&path, "x,y,z\n1,2,3\n4,5,6\n7,8,9\n").unwrap();
        let cloud = read_cloud(&path).unwrap();
        assert_eq!(cloud.len(), 3);
        assert_eq!(cloud.get(0), Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(cloud.get(2), Vector3::new(7.0, 8.0, 9.0));
    }

    #[test]
    fn missing_column_errors_at_line_one() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x,y\n1,2\n").unwrap();
        match read_cloud(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ragged_row_errors_with_line_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x,y,z\n1,2,3\n4,5\n").unwrap();
        match read_cloud(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_value_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x,y,z\n1,inf,3\n").unwrap();
        assert!(matches!(read_cloud(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn flow_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("flow.csv");
        let flow = FlowField::new(vec![
            Vector3::new(0.1, -0.2, 0.3),
            Vector3::new(f64::MIN_POSITIVE, 1e300, -1e-300),
        ])
        .unwrap();
        write_flow(&flow, &path).unwrap();
        assert_eq!(read_flow(&path).unwrap(), flow);
    }

    #[test]
    fn config_basic_keys() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cfg");
        std::fs::write(&path, "# comment\nalpha_cyc: 10\nk: 8\nseed: 3\n").unwrap();
        let cfg = read_config(&path).unwrap();
        assert_eq!(cfg.alpha_cyc, 10.0);
        assert_eq!(cfg.k, 8);
        assert_eq!(cfg.seed, 3);
        // Untouched keys keep their defaults.
        assert_eq!(cfg.k_n, FitConfig::default().k_n);
    }

    #[test]
    fn config_preset_rebases_before_overrides() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cfg");
        std::fs::write(&path, "alpha_surf: 2.5\npreset: stereo\n").unwrap();
        let cfg = read_config(&path).unwrap();
        assert_eq!(cfg.k, 32); // from the stereo preset
        assert_eq!(cfg.alpha_surf, 2.5); // explicit override wins
    }

    #[test]
    fn config_unknown_key_named_in_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cfg");
        std::fs::write(&path, "alpha_cycl: 10\n").unwrap();
        match read_config(&path) {
            Err(Error::UnknownConfigKey { key, line, .. }) => {
                assert_eq!(key, "alpha_cycl");
                assert_eq!(line, 1);
            }
            other => panic!("expected unknown-key error, got {other:?}"),
        }
    }

    #[test]
    fn report_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("report.json");
        let record = LossRecord {
            dist: 0.5,
            surf: 0.25,
            cyc: 0.125,
            total: 2.0,
        };
        let report = Report {
            command: "fit".into(),
            seed: Some(7),
            source: Some("a.csv".into()),
            target: Some("b.csv".into()),
            config: Some(FitConfig::stereo()),
            loss: Some(LossSummary {
                iterations: 100,
                converged: true,
                best_iteration: 93,
                initial: record,
                last: record,
                best: record,
            }),
            metrics: Some(Metrics {
                epe: 0.031,
                acc_strict: 99.0,
                acc_relaxed: 100.0,
                outliers: 0.5,
                angle_error: 0.01,
                n_points: 2048,
            }),
            runtime_seconds: None,
        };
        write_report(&report, &path).unwrap();
        let back = read_report(&path).unwrap();
        assert_eq!(back.command, "fit");
        assert_eq!(back.seed, Some(7));
        assert_eq!(back.config.unwrap().k, 32);
        assert_eq!(back.metrics.unwrap(), report.metrics.unwrap());
        assert_eq!(back.loss.unwrap().best_iteration, 93);
        assert_eq!(back.runtime_seconds, None);
    }
}
