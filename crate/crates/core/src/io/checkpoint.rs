//! Binary checkpoints.
//!
//! Layout: the magic `MVCK`, a `u32` format version and an array count,
//! then for each array its name (`u32` length + UTF-8), rank (`u32`), dims
//! (`u64` each) and the values as little-endian `f32`. Integers such as
//! faces and step counters are stored as exactly representable floats.

use std::collections::BTreeMap;
use std::path::Path;

use crate::appearance::{MlpDecoder, TriPlanes};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::losses::Stage;
use crate::mesh::TriangleMesh;
use crate::params::{AdamState, LearningRates, ParamGroup, ParamStore};
use crate::render::DensityMapping;

const MAGIC: &[u8; 4] = b"MVCK";
pub const FORMAT_VERSION: u32 = 1;
/// Largest integer a stored `f32` holds exactly.
const MAX_EXACT: f64 = 16_777_216.0;

/// Where a run stands: the stage being worked on, how many of its
/// iterations are complete and the current learning rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub stage: Stage,
    pub iteration: usize,
    pub lr: LearningRates,
    pub rollbacks: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub adam: AdamState,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq)]
struct Array {
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn q(x: f64) -> f64 {
    x as f32 as f64
}

/// Rounds everything a checkpoint stores to `f32`, so that continuing from
/// memory and continuing from the file are the same computation.
pub fn quantize(params: &mut ParamStore, adam: &mut AdamState, lr: &mut LearningRates) {
    params.quantize_f32();
    for slot in adam.m.iter_mut().chain(adam.v.iter_mut()) {
        slot.iter_mut().for_each(|x| *x = q(*x));
    }
    for g in ParamGroup::ALL {
        let v = q(lr.get(g));
        match g {
            ParamGroup::Vertices => lr.vertices = v,
            ParamGroup::Planes => lr.planes = v,
            ParamGroup::Decoder => lr.decoder = v,
            ParamGroup::Scale => lr.scale = v,
        }
    }
}

fn stage_code(s: Stage) -> f64 {
    Stage::ALL.iter().position(|&x| x == s).unwrap() as f64
}

fn exact_int(x: f32, what: &str) -> Result<usize> {
    let v = x as f64;
    if v < 0.0 || v.fract() != 0.0 || v > MAX_EXACT {
        return Err(Error::InvalidCheckpoint(format!(
            "{what}: {x} is not a valid count/index"
        )));
    }
    Ok(v as usize)
}

impl Checkpoint {
    fn arrays(&self) -> Result<BTreeMap<String, Array>> {
        let mut out = BTreeMap::new();
        let mut put = |name: &str, dims: Vec<usize>, data: Vec<f64>| {
            debug_assert_eq!(dims.iter().product::<usize>(), data.len());
            out.insert(
                name.to_string(),
                Array {
                    dims,
                    data: data.into_iter().map(|x| x as f32).collect(),
                },
            );
        };
        let mesh = &self.params.mesh;
        if mesh.vertex_count() as f64 > MAX_EXACT {
            return Err(Error::InvalidArgument(
                "mesh too large for the checkpoint format".into(),
            ));
        }
        put(
            "mesh.vertices",
            vec![mesh.vertex_count(), 3],
            mesh.vertices()
                .iter()
                .flat_map(|v| [v.x, v.y, v.z])
                .collect(),
        );
        put(
            "mesh.faces",
            vec![mesh.face_count(), 3],
            mesh.faces()
                .iter()
                .flat_map(|f| f.map(|i| i as f64))
                .collect(),
        );
        let planes = &self.params.planes;
        let b = planes.bounds();
        let mut meta = vec![planes.resolution() as f64];
        meta.extend(planes.dims().map(|d| d as f64));
        meta.extend([b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z]);
        put("planes.meta", vec![meta.len()], meta);
        put(
            "planes.data",
            vec![planes.data().len()],
            planes.data().to_vec(),
        );
        let dec = &self.params.decoder;
        put(
            "decoder.feature_dim",
            vec![1],
            vec![dec.feature_dim() as f64],
        );
        put(
            "decoder.sizes",
            vec![dec.sizes().len()],
            dec.sizes().iter().map(|&s| s as f64).collect(),
        );
        put(
            "decoder.params",
            vec![dec.params().len()],
            dec.params().to_vec(),
        );
        put("density.scale", vec![1], vec![self.params.mapping.scale]);
        let a = &self.adam;
        put(
            "adam.steps",
            vec![4],
            a.steps.iter().map(|&s| s as f64).collect(),
        );
        for g in ParamGroup::ALL {
            let i = ParamGroup::ALL.iter().position(|&x| x == g).unwrap();
            put(
                &format!("adam.m.{}", g.name()),
                vec![a.m[i].len()],
                a.m[i].clone(),
            );
            put(
                &format!("adam.v.{}", g.name()),
                vec![a.v[i].len()],
                a.v[i].clone(),
            );
        }
        let p = &self.progress;
        put(
            "progress",
            vec![7],
            vec![
                stage_code(p.stage),
                p.iteration as f64,
                p.rollbacks as f64,
                p.lr.vertices,
                p.lr.planes,
                p.lr.decoder,
                p.lr.scale,
            ],
        );
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arrays = self.arrays()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, a) in &arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
            for &d in &a.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &a.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut arrays = parse(bytes)?;
        let mut take = |name: &str| {
            arrays
                .remove(name)
                .ok_or_else(|| Error::InvalidCheckpoint(format!("missing array {name:?}")))
        };
        let f = |a: &Array| a.data.iter().map(|&x| x as f64).collect::<Vec<f64>>();

        let verts = take("mesh.vertices")?;
        let faces = take("mesh.faces")?;
        if verts.dims.len() != 2
            || verts.dims[1] != 3
            || faces.dims.len() != 2
            || faces.dims[1] != 3
        {
            return Err(Error::InvalidCheckpoint("mesh arrays must be N x 3".into()));
        }
        let vertices: Vec<Vec3> = verts
            .data
            .chunks(3)
            .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64))
            .collect();
        let face_list = faces
            .data
            .chunks(3)
            .map(|c| {
                Ok([
                    exact_int(c[0], "face")?,
                    exact_int(c[1], "face")?,
                    exact_int(c[2], "face")?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        let mesh = TriangleMesh::new(vertices, face_list)
            .map_err(|e| Error::InvalidCheckpoint(format!("mesh: {e}")))?;

        let meta = take("planes.meta")?;
        if meta.data.len() != 10 {
            return Err(Error::InvalidCheckpoint(
                "planes.meta must hold 10 values".into(),
            ));
        }
        let m = f(&meta);
        let resolution = exact_int(meta.data[0], "plane resolution")?;
        let dims = [
            exact_int(meta.data[1], "plane dim")?,
            exact_int(meta.data[2], "plane dim")?,
            exact_int(meta.data[3], "plane dim")?,
        ];
        let bounds = Aabb::new(Vec3::new(m[4], m[5], m[6]), Vec3::new(m[7], m[8], m[9]));
        let mut planes = TriPlanes::zeros(resolution, dims, bounds)
            .map_err(|e| Error::InvalidCheckpoint(format!("planes: {e}")))?;
        let pdata = take("planes.data")?;
        if pdata.data.len() != planes.data().len() {
            return Err(Error::InvalidCheckpoint(
                "planes.data has the wrong length".into(),
            ));
        }
        planes.data_mut().copy_from_slice(&f(&pdata));

        let feature_dim = exact_int(
            take("decoder.feature_dim")?
                .data
                .first()
                .copied()
                .unwrap_or(-1.0),
            "feature dim",
        )?;
        let sizes = take("decoder.sizes")?
            .data
            .iter()
            .map(|&x| exact_int(x, "decoder size"))
            .collect::<Result<Vec<_>>>()?;
        let mut decoder = MlpDecoder::zeros(feature_dim, sizes)
            .map_err(|e| Error::InvalidCheckpoint(format!("decoder: {e}")))?;
        let dparams = take("decoder.params")?;
        if dparams.data.len() != decoder.params().len() {
            return Err(Error::InvalidCheckpoint(
                "decoder.params has the wrong length".into(),
            ));
        }
        decoder.params_mut().copy_from_slice(&f(&dparams));

        let scale = take("density.scale")?;
        let scale = *scale
            .data
            .first()
            .ok_or_else(|| Error::InvalidCheckpoint("empty density.scale".into()))?
            as f64;
        let params = ParamStore::new(mesh, planes, decoder, DensityMapping::new(scale))
            .map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;

        let mut adam = AdamState::new(&params);
        let steps = take("adam.steps")?;
        if steps.data.len() != 4 {
            return Err(Error::InvalidCheckpoint(
                "adam.steps must hold 4 values".into(),
            ));
        }
        for (i, &s) in steps.data.iter().enumerate() {
            adam.steps[i] = exact_int(s, "adam step")? as u64;
        }
        for (i, g) in ParamGroup::ALL.into_iter().enumerate() {
            for (prefix, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let name = format!("adam.{prefix}.{}", g.name());
                let a = take(&name)?;
                if a.data.len() != slot.len() {
                    return Err(Error::InvalidCheckpoint(format!(
                        "{name} has the wrong length"
                    )));
                }
                *slot = f(&a);
            }
        }

        let p = take("progress")?;
        if p.data.len() != 7 {
            return Err(Error::InvalidCheckpoint(
                "progress must hold 7 values".into(),
            ));
        }
        let stage = *Stage::ALL
            .get(exact_int(p.data[0], "stage")?)
            .ok_or_else(|| Error::InvalidCheckpoint("unknown stage".into()))?;
        let v = f(&p);
        let progress = Progress {
            stage,
            iteration: exact_int(p.data[1], "iteration")?,
            rollbacks: exact_int(p.data[2], "rollbacks")?,
            lr: LearningRates {
                vertices: v[3],
                planes: v[4],
                decoder: v[5],
                scale: v[6],
            },
        };
        if let Some(name) = arrays.keys().next() {
            log::warn!("checkpoint holds unknown array {name:?}; ignored");
        }
        Ok(Checkpoint {
            params,
            adam,
            progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::InvalidCheckpoint(m) => {
                Error::InvalidCheckpoint(format!("{}: {m}", path.display()))
            }
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::InvalidCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse(bytes: &[u8]) -> Result<BTreeMap<String, Array>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::InvalidCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::InvalidCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::InvalidCheckpoint("array name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::InvalidCheckpoint(format!(
                "{name}: rank {rank} too large"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut total: usize = 1;
        for _ in 0..rank {
            let d = r.u64()? as usize;
            total = total
                .checked_mul(d)
                .ok_or_else(|| Error::InvalidCheckpoint(format!("{name}: size overflow")))?;
            dims.push(d);
        }
        let raw = r.take(
            total
                .checked_mul(4)
                .ok_or_else(|| Error::InvalidCheckpoint(format!("{name}: size overflow")))?,
        )?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidCheckpoint(format!(
                "{name}: non-finite value"
            )));
        }
        if out.insert(name.clone(), Array { dims, data }).is_some() {
            return Err(Error::InvalidCheckpoint(format!(
                "duplicate array {name:?}"
            )));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::InvalidCheckpoint("trailing bytes".into()));
    }
    Ok(out)
}
