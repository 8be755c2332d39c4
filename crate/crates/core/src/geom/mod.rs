//! Synthetic datasets, their labeling rules, fitting and registration.
//!
//! Dataset binary layout (little-endian):
//!
//! ```text
//! magic   "HDDS"
//! version u32 = 1
//! task    u8        0 line, 1 plane, 2 reg3d, 3 epipolar
//! dim     u32       columns per row
//! rows    u64
//! tau     f64       label threshold used
//! n_truth u32, truth n_truth x f64
//! rows x { dim x f64, label u8 }
//! ```
//!
//! The CSV form carries the same header as `# key=value` fields and one
//! `x0,...,label` line per row.

mod epipolar;
mod fit;
mod pattern;
mod rigid;

use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use epipolar::{
    make_epipolar_correspondences, row_epipolar_distance, skew, symmetric_epipolar_distance, EpipolarParams, EssentialMatrix,
    DEFAULT_EPIPOLAR_TAU,
};
pub use fit::{fit_line_least_squares, line_angle_degrees, LineFit};
pub use pattern::{
    counts_for_density, counts_for_ratio, random_line, random_plane, sample_line_dataset, sample_plane_dataset, LinearPattern,
    PatternParams,
};
pub use rigid::{
    hyperplane_block, kabsch, kabsch_pairs, make_3d_correspondences, ransac_registration, rigid_residual, CorrespondenceParams,
    RansacResult, RigidTransform,
};

use crate::binio::*;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Line,
    Plane,
    Reg3d,
    Epipolar,
}

impl Task {
    fn tag(self) -> u8 {
        match self {
            Task::Line => 0,
            Task::Plane => 1,
            Task::Reg3d => 2,
            Task::Epipolar => 3,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            0 => Task::Line,
            1 => Task::Plane,
            2 => Task::Reg3d,
            3 => Task::Epipolar,
            _ => return Err(Error::Format(format!("unknown task tag {t}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Line => "line",
            Task::Plane => "plane",
            Task::Reg3d => "reg3d",
            Task::Epipolar => "epipolar",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Task::Line, Task::Plane, Task::Reg3d, Task::Epipolar]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GroundTruth {
    Pattern(LinearPattern),
    Rigid(RigidTransform),
    Essential(EssentialMatrix),
}

impl GroundTruth {
    /// Flat parameter vector, as stored in dataset files.
    pub fn to_params(&self) -> Vec<f64> {
        match self {
            GroundTruth::Pattern(p) => p.to_params(),
            GroundTruth::Rigid(t) => t.to_params(),
            GroundTruth::Essential(e) => e.to_params(),
        }
    }

    fn from_params(task: Task, p: &[f64]) -> Result<Self> {
        Ok(match task {
            Task::Line | Task::Plane => GroundTruth::Pattern(LinearPattern::from_params(p)?),
            Task::Reg3d => GroundTruth::Rigid(RigidTransform::from_params(p)?),
            Task::Epipolar => GroundTruth::Essential(EssentialMatrix::from_params(p)?),
        })
    }
}

/// Labeled points of one problem instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    /// `M x D` rows: points, or concatenated correspondence pairs.
    pub points: Array2<f64>,
    pub labels: Vec<bool>,
    pub truth: GroundTruth,
    pub label_tau: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn inlier_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn inlier_ratio(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.inlier_count() as f64 / self.len() as f64
        }
    }

    pub fn write_binary<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        w.write_all(b"HDDS")?;
        write_u32(&mut w, 1)?;
        write_u8(&mut w, self.task.tag())?;
        write_u32(&mut w, self.dim() as u32)?;
        write_u64(&mut w, self.len() as u64)?;
        write_f64(&mut w, self.label_tau)?;
        let truth = self.truth.to_params();
        write_u32(&mut w, truth.len() as u32)?;
        for v in truth {
            write_f64(&mut w, v)?;
        }
        for (row, &l) in self.points.outer_iter().zip(&self.labels) {
            for &v in row {
                write_f64(&mut w, v)?;
            }
            write_u8(&mut w, u8::from(l))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        expect_magic(&mut r, b"HDDS", "dataset")?;
        let version = read_u32(&mut r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let task = Task::from_tag(read_u8(&mut r)?)?;
        let dim = read_u32(&mut r)? as usize;
        let rows = read_u64(&mut r)? as usize;
        let label_tau = read_f64(&mut r)?;
        let n_truth = read_u32(&mut r)? as usize;
        if n_truth > 1 << 16 || dim > 1 << 16 {
            return Err(Error::Format("implausible dataset header".into()));
        }
        let truth = (0..n_truth).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let truth = GroundTruth::from_params(task, &truth)?;
        let mut points = Array2::zeros((rows, dim));
        let mut labels = Vec::with_capacity(rows);
        for mut row in points.outer_iter_mut() {
            for v in row.iter_mut() {
                *v = read_f64(&mut r)?;
            }
            labels.push(read_u8(&mut r)? != 0);
        }
        Ok(Self { task, points, labels, truth, label_tau })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        writeln!(w, "# hdconv dataset v1")?;
        let truth: Vec<String> = self.truth.to_params().iter().map(f64::to_string).collect();
        writeln!(
            w,
            "# task={},dim={},rows={},tau={},truth={}",
            self.task,
            self.dim(),
            self.len(),
            self.label_tau,
            truth.join(";")
        )?;
        let mut cols: Vec<String> = (0..self.dim()).map(|d| format!("x{d}")).collect();
        cols.push("label".into());
        writeln!(w, "{}", cols.join(","))?;
        for (row, &l) in self.points.outer_iter().zip(&self.labels) {
            let mut f: Vec<String> = row.iter().map(f64::to_string).collect();
            f.push(u8::from(l).to_string());
            writeln!(w, "{}", f.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let mut next = || -> Result<String> {
            lines.next().ok_or_else(|| Error::Format("truncated csv".into()))?.map_err(Error::from)
        };
        let _title = next()?;
        let fields = parse_header_fields(&next()?);
        let task: Task = header_value(&fields, "task")?.parse().map_err(|_| Error::Format("bad task".into()))?;
        let dim: usize = parse_num(header_value(&fields, "dim")?, "dim")?;
        let rows: usize = parse_num(header_value(&fields, "rows")?, "rows")?;
        let label_tau: f64 = parse_num(header_value(&fields, "tau")?, "tau")?;
        let truth = header_value(&fields, "truth")?
            .split(';')
            .map(|s| parse_num::<f64>(s, "truth parameter"))
            .collect::<Result<Vec<_>>>()?;
        let truth = GroundTruth::from_params(task, &truth)?;
        let _columns = next()?;
        let mut points = Array2::zeros((rows, dim));
        let mut labels = Vec::with_capacity(rows);
        for i in 0..rows {
            let line = next()?;
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != dim + 1 {
                return Err(Error::Format(format!("row {i}: expected {} fields", dim + 1)));
            }
            for (v, s) in points.row_mut(i).iter_mut().zip(&parts) {
                *v = parse_num(s, "coordinate")?;
            }
            labels.push(match parts[dim].trim() {
                "1" => true,
                "0" => false,
                s => return Err(Error::Format(format!("row {i}: bad label `{s}`"))),
            });
        }
        Ok(Self { task, points, labels, truth, label_tau })
    }
}
