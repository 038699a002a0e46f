//! Video records and their on-disk layout.
//!
//! A dataset directory holds `dataset.json` (split lists by video id) and a
//! `videos/` folder with one JSON sidecar per video plus binary arrays:
//!
//! ```text
//! magic  b"TPRC"
//! u32    version (1)
//! u32    number of dims
//! u64    each dim
//! f64    payload, row-major, little endian
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::SupervisionFlags;
use crate::param_vector::{ParamVector, PARAM_DIM};

const MAGIC: &[u8; 4] = b"TPRC";
const RECORD_VERSION: u32 = 1;
const DATASET_VERSION: u32 = 1;

/// An n-dimensional array read from or written to a record file.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Record {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Record(format!(
                "dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * (self.dims.len() + self.data.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(Error::Record("truncated record".into()));
            }
            let (a, b) = r.split_at(n);
            r = b;
            Ok(a)
        };
        if take(4)? != MAGIC {
            return Err(Error::Record("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != RECORD_VERSION {
            return Err(Error::Record(format!("unsupported record version {version}")));
        }
        let ndims = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Record("dims overflow".into()))?;
        let payload = take(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::Record("dims overflow".into()))?,
        )?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if !r.is_empty() {
            return Err(Error::Record("trailing bytes after payload".into()));
        }
        Self::new(dims, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// Reads a record row by row (rows along the first dim) without holding
/// the payload in memory.
#[derive(Debug)]
pub struct RecordStream<R> {
    reader: R,
    pub dims: Vec<usize>,
    row_len: usize,
    remaining: usize,
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Record("truncated record".into()),
        _ => Error::Io(e),
    })
}

impl<R: Read> RecordStream<R> {
    pub fn open(mut reader: R) -> Result<Self> {
        let mut b4 = [0u8; 4];
        read_exact_or_truncated(&mut reader, &mut b4)?;
        if &b4 != MAGIC {
            return Err(Error::Record("bad magic".into()));
        }
        read_exact_or_truncated(&mut reader, &mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != RECORD_VERSION {
            return Err(Error::Record(format!("unsupported record version {version}")));
        }
        read_exact_or_truncated(&mut reader, &mut b4)?;
        let ndims = u32::from_le_bytes(b4) as usize;
        if ndims == 0 {
            return Err(Error::Record("a streamed record needs at least one dim".into()));
        }
        let mut dims = Vec::with_capacity(ndims);
        let mut b8 = [0u8; 8];
        for _ in 0..ndims {
            read_exact_or_truncated(&mut reader, &mut b8)?;
            dims.push(u64::from_le_bytes(b8) as usize);
        }
        let row_len = dims[1..]
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Record("dims overflow".into()))?;
        Ok(Self {
            reader,
            remaining: dims[0],
            dims,
            row_len,
        })
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn next_row(&mut self) -> Result<Option<Vec<f64>>> {
        if self.remaining == 0 {
            let mut probe = [0u8; 1];
            return match self.reader.read(&mut probe)? {
                0 => Ok(None),
                _ => Err(Error::Record("trailing bytes after payload".into())),
            };
        }
        let mut buf = vec![0u8; 8 * self.row_len];
        read_exact_or_truncated(&mut self.reader, &mut buf)?;
        self.remaining -= 1;
        Ok(Some(
            buf.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        ))
    }
}

/// One video: per-frame static features and whatever labels it carries.
/// Joint arrays are `N x 3` (metres) and `N x 2` per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub static_feats: Vec<Vec<f64>>,
    pub gt_params: Option<Vec<ParamVector>>,
    pub gt_joints3d: Option<Vec<DMatrix<f64>>>,
    pub gt_joints2d: Vec<DMatrix<f64>>,
    pub flags: SupervisionFlags,
}

impl VideoRecord {
    pub fn len(&self) -> usize {
        self.gt_joints2d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_joints2d.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.static_feats.first().map_or(0, Vec::len)
    }

    pub fn num_joints(&self) -> usize {
        self.gt_joints2d.first().map_or(0, DMatrix::nrows)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let bad = |m: &str| Err(Error::Record(format!("video {}: {m}", self.id)));
        if n == 0 {
            return bad("no frames");
        }
        let (f, j) = (self.feature_dim(), self.num_joints());
        if self.static_feats.len() != n && !self.static_feats.is_empty() {
            return bad("feature count differs from frame count");
        }
        if self.static_feats.iter().any(|v| v.len() != f) {
            return bad("feature vectors differ in length");
        }
        if self.gt_joints2d.iter().any(|m| m.shape() != (j, 2)) {
            return bad("2D joints must be N x 2");
        }
        if let Some(p) = &self.gt_params {
            if p.len() != n {
                return bad("parameter count differs from frame count");
            }
        }
        if let Some(x) = &self.gt_joints3d {
            if x.len() != n || x.iter().any(|m| m.shape() != (j, 3)) {
                return bad("3D joints must be N x 3 per frame");
            }
        }
        if self.flags.has_3d && self.gt_joints3d.is_none() {
            return bad("flagged 3D but no 3D joints");
        }
        if self.flags.has_smpl && self.gt_params.is_none() {
            return bad("flagged parameters but none stored");
        }
        Ok(())
    }

    /// Copy with only 2D supervision left (features and 2D joints).
    pub fn without_3d_labels(&self) -> Self {
        Self {
            id: self.id.clone(),
            static_feats: self.static_feats.clone(),
            gt_params: None,
            gt_joints3d: None,
            gt_joints2d: self.gt_joints2d.clone(),
            flags: SupervisionFlags::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VideoSidecar {
    id: String,
    length: usize,
    num_joints: usize,
    feature_dim: usize,
    flags: SupervisionFlags,
    features: Option<String>,
    params: Option<String>,
    joints3d: Option<String>,
    joints2d: String,
}

fn stack_matrices(ms: &[DMatrix<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ms.iter().map(|m| m.len()).sum());
    for m in ms {
        for r in 0..m.nrows() {
            out.extend(m.row(r).iter());
        }
    }
    out
}

fn unstack_matrices(rec: &Record, cols: usize) -> Result<Vec<DMatrix<f64>>> {
    if rec.dims.len() != 3 || rec.dims[2] != cols {
        return Err(Error::Record(format!(
            "expected frames x N x {cols}, got {:?}",
            rec.dims
        )));
    }
    let (frames, n) = (rec.dims[0], rec.dims[1]);
    Ok((0..frames)
        .map(|t| DMatrix::from_row_slice(n, cols, &rec.data[t * n * cols..(t + 1) * n * cols]))
        .collect())
}

pub fn save_video(dir: &Path, v: &VideoRecord) -> Result<()> {
    v.validate()?;
    fs::create_dir_all(dir)?;
    let (n, j, f) = (v.len(), v.num_joints(), v.feature_dim());
    let name = |kind: &str| format!("{}.{kind}.bin", v.id);
    let features = (!v.static_feats.is_empty()).then(|| name("features"));
    if let Some(file) = &features {
        Record::new(vec![n, f], v.static_feats.concat())?.save(&dir.join(file))?;
    }
    let params = v.gt_params.as_ref().map(|_| name("params"));
    if let (Some(file), Some(p)) = (&params, &v.gt_params) {
        let data = p.iter().flat_map(|x| x.as_slice().iter().copied()).collect();
        Record::new(vec![n, PARAM_DIM], data)?.save(&dir.join(file))?;
    }
    let joints3d = v.gt_joints3d.as_ref().map(|_| name("joints3d"));
    if let (Some(file), Some(x)) = (&joints3d, &v.gt_joints3d) {
        Record::new(vec![n, j, 3], stack_matrices(x))?.save(&dir.join(file))?;
    }
    let joints2d = name("joints2d");
    Record::new(vec![n, j, 2], stack_matrices(&v.gt_joints2d))?.save(&dir.join(&joints2d))?;
    let side = VideoSidecar {
        id: v.id.clone(),
        length: n,
        num_joints: j,
        feature_dim: f,
        flags: v.flags,
        features,
        params,
        joints3d,
        joints2d,
    };
    fs::write(dir.join(format!("{}.json", v.id)), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

/// Loads a video from its sidecar file.
pub fn load_video(sidecar: &Path) -> Result<VideoRecord> {
    let side: VideoSidecar = serde_json::from_str(&fs::read_to_string(sidecar)?)?;
    let dir = sidecar.parent().unwrap_or(Path::new("."));
    let static_feats = match &side.features {
        Some(file) => {
            let r = Record::load(&dir.join(file))?;
            if r.dims != [side.length, side.feature_dim] {
                return Err(Error::Record(format!("feature dims {:?}", r.dims)));
            }
            r.data.chunks(side.feature_dim.max(1)).map(<[f64]>::to_vec).collect()
        }
        None => Vec::new(),
    };
    let gt_params = match &side.params {
        Some(file) => {
            let r = Record::load(&dir.join(file))?;
            if r.dims != [side.length, PARAM_DIM] {
                return Err(Error::Record(format!("parameter dims {:?}", r.dims)));
            }
            Some(
                r.data
                    .chunks(PARAM_DIM)
                    .map(ParamVector::from_slice)
                    .collect::<Result<_>>()?,
            )
        }
        None => None,
    };
    let gt_joints3d = match &side.joints3d {
        Some(file) => Some(unstack_matrices(&Record::load(&dir.join(file))?, 3)?),
        None => None,
    };
    let gt_joints2d = unstack_matrices(&Record::load(&dir.join(&side.joints2d))?, 2)?;
    let v = VideoRecord {
        id: side.id,
        static_feats,
        gt_params,
        gt_joints3d,
        gt_joints2d,
        flags: side.flags,
    };
    v.validate()?;
    if v.len() != side.length {
        return Err(Error::Record(format!(
            "video {}: sidecar length {} vs {}",
            v.id,
            side.length,
            v.len()
        )));
    }
    Ok(v)
}

/// Video ids per role.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train_3d: Vec<String>,
    pub train_2d: Vec<String>,
    pub test: Vec<String>,
    /// Motion-only videos whose 3D joints serve as real discriminator input.
    pub real: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    num_joints: usize,
    feature_dim: usize,
    splits: Splits,
}

/// In-memory dataset; split lists index into `videos`.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub videos: Vec<VideoRecord>,
    pub train_3d: Vec<usize>,
    pub train_2d: Vec<usize>,
    pub test: Vec<usize>,
    pub real: Vec<usize>,
}

impl Dataset {
    pub fn push(&mut self, v: VideoRecord) -> usize {
        self.videos.push(v);
        self.videos.len() - 1
    }

    pub fn feature_dim(&self) -> usize {
        self.videos
            .iter()
            .map(VideoRecord::feature_dim)
            .find(|&f| f > 0)
            .unwrap_or(0)
    }

    pub fn num_joints(&self) -> usize {
        self.videos.first().map_or(0, VideoRecord::num_joints)
    }

    pub fn splits(&self) -> Splits {
        let ids = |ix: &[usize]| ix.iter().map(|&i| self.videos[i].id.clone()).collect();
        Splits {
            train_3d: ids(&self.train_3d),
            train_2d: ids(&self.train_2d),
            test: ids(&self.test),
            real: ids(&self.real),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let vdir = dir.join("videos");
        fs::create_dir_all(&vdir)?;
        for v in &self.videos {
            save_video(&vdir, v)?;
        }
        let m = Manifest {
            version: DATASET_VERSION,
            num_joints: self.num_joints(),
            feature_dim: self.feature_dim(),
            splits: self.splits(),
        };
        fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
        if m.version != DATASET_VERSION {
            return Err(Error::Record(format!("unsupported dataset version {}", m.version)));
        }
        let mut ds = Dataset::default();
        let mut index = std::collections::HashMap::new();
        let mut resolve = |ds: &mut Dataset, id: &str| -> Result<usize> {
            if let Some(&i) = index.get(id) {
                return Ok(i);
            }
            let v = load_video(&dir.join("videos").join(format!("{id}.json")))?;
            if v.num_joints() != m.num_joints {
                return Err(Error::Record(format!("video {id} has {} joints", v.num_joints())));
            }
            if v.feature_dim() != 0 && v.feature_dim() != m.feature_dim {
                return Err(Error::Record(format!("video {id} has feature dim {}", v.feature_dim())));
            }
            let i = ds.push(v);
            index.insert(id.to_string(), i);
            Ok(i)
        };
        for id in &m.splits.train_3d {
            let i = resolve(&mut ds, id)?;
            ds.train_3d.push(i);
        }
        for id in &m.splits.train_2d {
            let i = resolve(&mut ds, id)?;
            ds.train_2d.push(i);
        }
        for id in &m.splits.test {
            let i = resolve(&mut ds, id)?;
            ds.test.push(i);
        }
        for id in &m.splits.real {
            let i = resolve(&mut ds, id)?;
            ds.real.push(i);
        }
        Ok(ds)
    }
}
