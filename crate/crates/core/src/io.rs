//! On-disk formats: the CVM1 code-vector matrix (binary and CSV), codes and
//! tree files, embedding files, model checkpoints, metrics streams and
//! separation trajectories.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{GifError, Result};
use crate::model::{Backbone, GifModel, TokenHead, TokenHeads};
use crate::nn::{Dense, Mlp};
use crate::sphere::{CodeVectorMatrix, SeparationReport};
use crate::tokenizer::{CodeBook, CodeTree, TreeChild, TreeNode};

pub const CVM_MAGIC: &[u8; 4] = b"CVM1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GIFC";
const CHECKPOINT_VERSION: u32 = 1;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| GifError::format(format!("cannot open {}: {e}", path.display())))
}

/// Header plus `m * d` float32 values, row-major. Rows need not be unit norm.
pub fn write_cvm_raw<W: Write>(mut w: W, m: usize, d: usize, data: &[f64]) -> Result<()> {
    if data.len() != m * d {
        return Err(GifError::DimensionMismatch { expected: m * d, got: data.len() });
    }
    let dims = |x: usize| u32::try_from(x).map_err(|_| GifError::format("dimension exceeds u32"));
    w.write_all(CVM_MAGIC)?;
    w.write_u32::<LittleEndian>(dims(m)?)?;
    w.write_u32::<LittleEndian>(dims(d)?)?;
    for &x in data {
        w.write_f32::<LittleEndian>(x as f32)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cvm_raw<R: Read>(mut r: R) -> Result<(usize, usize, Vec<f64>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| GifError::format("file too short for a CVM1 header"))?;
    if &magic != CVM_MAGIC {
        return Err(GifError::format(format!("bad magic {magic:?}, expected CVM1")));
    }
    let m = r.read_u32::<LittleEndian>()? as usize;
    let d = r.read_u32::<LittleEndian>()? as usize;
    let mut data = vec![0f32; m * d];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|_| GifError::format(format!("body shorter than the declared {m} x {d} values")))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(GifError::format("trailing bytes after CVM1 body"));
    }
    Ok((m, d, data.into_iter().map(f64::from).collect()))
}

pub fn write_cvm<W: Write>(w: W, h: &CodeVectorMatrix) -> Result<()> {
    write_cvm_raw(w, h.m(), h.d(), h.as_flat())
}

/// Reads a code-vector matrix; rows are renormalized to undo float32
/// rounding.
pub fn read_cvm<R: Read>(r: R) -> Result<CodeVectorMatrix> {
    let (m, d, data) = read_cvm_raw(r)?;
    CodeVectorMatrix::from_flat(m, d, data)
}

/// One row per line, comma-separated; lines starting with `#` are comments.
pub fn write_cvm_csv<W: Write>(mut w: W, h: &CodeVectorMatrix) -> Result<()> {
    for row in h.rows() {
        let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cvm_csv<R: BufRead>(r: R) -> Result<CodeVectorMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| GifError::format(format!("line {}: {e}", n + 1)))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(GifError::DimensionMismatch { expected: first.len(), got: row.len() });
            }
        }
        rows.push(row);
    }
    CodeVectorMatrix::from_rows(&rows)
}

/// Provenance written next to binary artifacts as `<file>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub kind: String,
    pub config_hash: String,
    pub m: usize,
    pub d: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

pub fn save_cvm(path: &Path, h: &CodeVectorMatrix, kind: &str, config_hash: &str) -> Result<()> {
    write_cvm(create(path)?, h)?;
    let meta = ArtifactMeta { kind: kind.into(), config_hash: config_hash.into(), m: h.m(), d: h.d() };
    save_json(&sidecar_path(path), &meta)
}

/// Loads a CVM1 file, or the CSV form when the extension is `.csv`.
pub fn load_cvm(path: &Path) -> Result<CodeVectorMatrix> {
    if path.extension().is_some_and(|e| e == "csv") {
        read_cvm_csv(open(path)?)
    } else {
        read_cvm(open(path)?)
    }
}

pub fn load_meta(path: &Path) -> Result<Option<ArtifactMeta>> {
    let side = sidecar_path(path);
    if side.exists() {
        load_json(&side).map(Some)
    } else {
        Ok(None)
    }
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(open(path)?)?)
}

/// `#l= v= m=` header, `#config=` line, then `identity,c_1,...,c_l`.
pub fn write_codes<W: Write>(mut w: W, codes: &CodeBook, config_hash: &str) -> Result<()> {
    writeln!(w, "#l={} v={} m={}", codes.l, codes.v, codes.m())?;
    writeln!(w, "#config={config_hash}")?;
    for (id, code) in codes.iter() {
        let tokens: Vec<String> = code.iter().map(|t| t.to_string()).collect();
        writeln!(w, "{id},{}", tokens.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Parsed codes file and the config hash it carries, if any.
pub fn read_codes<R: BufRead>(r: R) -> Result<(CodeBook, Option<String>)> {
    let mut header: Option<(usize, usize, usize)> = None;
    let mut hash = None;
    let mut rows: Vec<(usize, Vec<u32>)> = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#config=") {
            hash = Some(rest.to_string());
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut kv = HashMap::new();
            for part in rest.split_whitespace() {
                if let Some((k, v)) = part.split_once('=') {
                    kv.insert(k, v.parse::<usize>().map_err(|e| GifError::format(format!("header {k}: {e}")))?);
                }
            }
            if let (Some(&l), Some(&v), Some(&m)) = (kv.get("l"), kv.get("v"), kv.get("m")) {
                header = Some((l, v, m));
            }
            continue;
        }
        let bad = |e: std::num::ParseIntError| GifError::format(format!("codes line {}: {e}", n + 1));
        let mut fields = line.split(',').map(str::trim);
        let id = fields.next().unwrap_or_default().parse::<usize>().map_err(bad)?;
        let tokens = fields.map(|t| t.parse::<u32>()).collect::<std::result::Result<Vec<_>, _>>().map_err(bad)?;
        rows.push((id, tokens));
    }
    let (l, v, m) = header.ok_or_else(|| GifError::format("codes file lacks the #l= v= m= header"))?;
    if rows.len() != m {
        return Err(GifError::Inconsistent(format!("codes header says m={m} but {} rows follow", rows.len())));
    }
    let mut codes = vec![None; m];
    for (id, tokens) in rows {
        if id >= m {
            return Err(GifError::IndexOutOfRange { index: id, len: m });
        }
        if codes[id].replace(tokens).is_some() {
            return Err(GifError::format(format!("identity {id} listed twice")));
        }
    }
    let codes = codes.into_iter().map(|c| c.expect("every id seen once")).collect();
    Ok((CodeBook::from_codes(l, v, codes)?, hash))
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    /// Row of this node's centroid in the centroid file.
    centroid: usize,
    size: usize,
    children: Vec<ChildRecord>,
}

#[derive(Serialize, Deserialize)]
struct ChildRecord {
    token: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    node: Option<NodeRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    leaf: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct TreeRecord {
    l: usize,
    v: usize,
    m: usize,
    d: usize,
    config_hash: String,
    centroids: String,
    root: NodeRecord,
}

fn to_record(node: &TreeNode, centroids: &mut Vec<f64>) -> NodeRecord {
    let d = node.centroid.len();
    let index = centroids.len() / d.max(1);
    centroids.extend(&node.centroid);
    let children = node
        .children
        .iter()
        .map(|(token, child)| match child {
            TreeChild::Node(n) => ChildRecord { token: *token, node: Some(to_record(n, centroids)), leaf: None },
            TreeChild::Leaf(y) => ChildRecord { token: *token, node: None, leaf: Some(*y) },
        })
        .collect();
    NodeRecord { centroid: index, size: node.size, children }
}

fn from_record(rec: NodeRecord, centroids: &[f64], d: usize) -> Result<TreeNode> {
    let start = rec.centroid * d;
    let centroid = centroids
        .get(start..start + d)
        .ok_or(GifError::IndexOutOfRange { index: rec.centroid, len: centroids.len() / d.max(1) })?
        .to_vec();
    let children = rec
        .children
        .into_iter()
        .map(|c| match (c.node, c.leaf) {
            (Some(n), None) => Ok((c.token, TreeChild::Node(from_record(n, centroids, d)?))),
            (None, Some(y)) => Ok((c.token, TreeChild::Leaf(y))),
            _ => Err(GifError::format("tree child must be exactly one of node or leaf")),
        })
        .collect::<Result<_>>()?;
    Ok(TreeNode { centroid, size: rec.size, children })
}

/// Writes the tree as nested JSON records at `path` and the node centroids,
/// in pre-order, to a CVM1 file beside it.
pub fn save_tree(path: &Path, tree: &CodeTree, config_hash: &str) -> Result<()> {
    let d = tree.root().centroid.len();
    let mut centroids = Vec::new();
    let root = to_record(tree.root(), &mut centroids);
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let cvm_name = format!("{stem}_centroids.cvm");
    write_cvm_raw(create(&path.with_file_name(&cvm_name))?, centroids.len() / d, d, &centroids)?;
    let record = TreeRecord {
        l: tree.l(),
        v: tree.v(),
        m: tree.m(),
        d,
        config_hash: config_hash.into(),
        centroids: cvm_name,
        root,
    };
    save_json(path, &record)
}

/// Loads a tree written by [`save_tree`] and the config hash it carries.
pub fn load_tree(path: &Path) -> Result<(CodeTree, String)> {
    let record: TreeRecord = load_json(path)?;
    let (_, d, centroids) = read_cvm_raw(open(&path.with_file_name(&record.centroids))?)?;
    if d != record.d {
        return Err(GifError::DimensionMismatch { expected: record.d, got: d });
    }
    let root = from_record(record.root, &centroids, d)?;
    Ok((CodeTree::from_root(record.l, record.v, record.m, root)?, record.config_hash))
}

/// `sample_id,label,e_1,...,e_d`; a non-numeric first line is a header.
pub fn read_embeddings_csv<R: BufRead>(r: R) -> Result<Vec<Sample>> {
    let mut out: Vec<Sample> = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if n == 0 && fields[0].parse::<u64>().is_err() {
            continue;
        }
        if fields.len() < 3 {
            return Err(GifError::format(format!("embedding line {}: need id, label and values", n + 1)));
        }
        let err = |what: &str| GifError::format(format!("embedding line {}: bad {what}", n + 1));
        let id = fields[0].parse().map_err(|_| err("sample id"))?;
        let label = fields[1].parse().map_err(|_| err("label"))?;
        let features = fields[2..]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| err("value"))?;
        if let Some(first) = out.first() {
            if first.features.len() != features.len() {
                return Err(GifError::DimensionMismatch { expected: first.features.len(), got: features.len() });
            }
        }
        out.push(Sample { id, label, features });
    }
    Ok(out)
}

pub fn write_embeddings_csv<W: Write>(mut w: W, samples: &[Sample]) -> Result<()> {
    let d = samples.first().map_or(0, |s| s.features.len());
    let cols: Vec<String> = (1..=d).map(|i| format!("e_{i}")).collect();
    writeln!(w, "sample_id,label,{}", cols.join(","))?;
    for s in samples {
        let vals: Vec<String> = s.features.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{},{},{}", s.id, s.label, vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// CVM1 rows paired line by line with a `sample_id,label` index file.
pub fn read_embeddings_cvm<R: Read, I: BufRead>(cvm: R, index: I) -> Result<Vec<Sample>> {
    let (m, d, data) = read_cvm_raw(cvm)?;
    let mut ids = Vec::with_capacity(m);
    for (n, line) in index.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut f = line.split(',').map(str::trim);
        let (Some(a), Some(b)) = (f.next(), f.next()) else {
            return Err(GifError::format(format!("index line {}: need sample_id,label", n + 1)));
        };
        match (a.parse::<u64>(), b.parse::<usize>()) {
            (Ok(id), Ok(label)) => ids.push((id, label)),
            _ if n == 0 => continue,
            _ => return Err(GifError::format(format!("index line {}: bad sample_id or label", n + 1))),
        }
    }
    if ids.len() != m {
        return Err(GifError::Inconsistent(format!("index lists {} samples, matrix has {m} rows", ids.len())));
    }
    Ok(ids
        .into_iter()
        .zip(data.chunks(d.max(1)))
        .map(|((id, label), row)| Sample { id, label, features: row.to_vec() })
        .collect())
}

/// Loads embeddings from a `.csv` file or a CVM1 file with a `<file>.ids.csv`
/// index beside it.
pub fn load_embeddings(path: &Path) -> Result<Vec<Sample>> {
    if path.extension().is_some_and(|e| e == "csv") {
        return read_embeddings_csv(open(path)?);
    }
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".ids.csv");
    read_embeddings_cvm(open(path)?, open(&path.with_file_name(name))?)
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn get_str<R: Read>(r: &mut R) -> Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n > 1 << 20 {
        return Err(GifError::format("checkpoint string too long"));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| GifError::format("checkpoint string is not UTF-8"))
}

fn put_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    w.write_u64::<LittleEndian>(xs.len() as u64)?;
    for &x in xs {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn get_f64s<R: Read>(r: &mut R, expected: usize) -> Result<Vec<f64>> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    if n != expected {
        return Err(GifError::format(format!("checkpoint buffer has {n} values, expected {expected}")));
    }
    let mut xs = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut xs)?;
    Ok(xs)
}

fn put_mlp<W: Write>(w: &mut W, net: &Mlp) -> Result<()> {
    w.write_u32::<LittleEndian>(net.input_dim() as u32)?;
    w.write_u32::<LittleEndian>(net.layers().len() as u32)?;
    for layer in net.layers() {
        w.write_u32::<LittleEndian>(layer.inputs as u32)?;
        w.write_u32::<LittleEndian>(layer.outputs as u32)?;
        put_f64s(w, &layer.weight)?;
        put_f64s(w, &layer.bias)?;
    }
    Ok(())
}

fn get_mlp<R: Read>(r: &mut R) -> Result<Mlp> {
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n == 0 {
        return Ok(Mlp::identity(dim));
    }
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let inputs = r.read_u32::<LittleEndian>()? as usize;
        let outputs = r.read_u32::<LittleEndian>()? as usize;
        let weight = get_f64s(r, inputs * outputs)?;
        let bias = get_f64s(r, outputs)?;
        layers.push(Dense { inputs, outputs, weight, bias });
    }
    Mlp::from_layers(layers)
}

/// Binary checkpoint: magic, version, config hash, scale, shapes, then the
/// backbone and every head at full precision.
pub fn write_checkpoint<W: Write>(mut w: W, model: &GifModel, config_hash: &str) -> Result<()> {
    let heads = &model.heads;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    put_str(&mut w, config_hash)?;
    w.write_f64::<LittleEndian>(heads.scale)?;
    for x in [heads.l(), heads.v, heads.d] {
        w.write_u32::<LittleEndian>(x as u32)?;
    }
    put_mlp(&mut w, &model.backbone.net)?;
    for h in &heads.heads {
        put_mlp(&mut w, &h.projection)?;
        put_f64s(&mut w, &h.classifier)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(GifModel, String)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| GifError::format("file too short for a checkpoint"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(GifError::format("not a checkpoint file"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(GifError::format(format!("unsupported checkpoint version {version}")));
    }
    let hash = get_str(&mut r)?;
    let scale = r.read_f64::<LittleEndian>()?;
    let l = r.read_u32::<LittleEndian>()? as usize;
    let v = r.read_u32::<LittleEndian>()? as usize;
    let d = r.read_u32::<LittleEndian>()? as usize;
    let net = get_mlp(&mut r)?;
    let mut heads = Vec::with_capacity(l);
    for _ in 0..l {
        let projection = get_mlp(&mut r)?;
        let classifier = get_f64s(&mut r, v * d)?;
        heads.push(TokenHead { projection, classifier });
    }
    let model = GifModel { backbone: Backbone { net }, heads: TokenHeads { heads, v, d, scale } };
    Ok((model, hash))
}

pub fn save_checkpoint(path: &Path, model: &GifModel, config_hash: &str) -> Result<()> {
    write_checkpoint(create(path)?, model, config_hash)
}

pub fn load_checkpoint(path: &Path) -> Result<(GifModel, String)> {
    read_checkpoint(open(path)?)
}

/// One line of the training metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub l_c: f64,
    pub l_ar: f64,
    pub token_acc: Vec<f64>,
    pub config_hash: String,
}

/// Newline-delimited JSON writer.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

impl MetricsWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self::new(create(path)?))
    }
}

pub fn read_metrics<R: BufRead>(r: R) -> Result<Vec<MetricsRecord>> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// `epoch,min,mean,max`, preceded by a `# config=` line.
pub fn write_separation_csv<W: Write>(mut w: W, trajectory: &[SeparationReport], config_hash: &str) -> Result<()> {
    writeln!(w, "# config={config_hash}")?;
    writeln!(w, "epoch,min,mean,max")?;
    for (epoch, r) in trajectory.iter().enumerate() {
        writeln!(w, "{epoch},{},{},{}", r.min_dist, r.mean_dist, r.max_dist)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_separation_csv(path: &Path, trajectory: &[SeparationReport], config_hash: &str) -> Result<()> {
    write_separation_csv(create(path)?, trajectory, config_hash)
}

pub fn save_codes(path: &Path, codes: &CodeBook, config_hash: &str) -> Result<()> {
    write_codes(create(path)?, codes, config_hash)
}

pub fn load_codes(path: &Path) -> Result<(CodeBook, Option<String>)> {
    read_codes(open(path)?)
}

pub fn writer(path: &Path) -> Result<BufWriter<File>> {
    create(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{assign_codes, build_code_tree, TokenizerConfig};
    use rand::SeedableRng;

    #[test]
    fn cvm_round_trip_and_layout() {
        let h = CodeVectorMatrix::from_rows(&[[1.0, 0.0], [0.0, -1.0], [0.6, 0.8]]).unwrap();
        let mut buf = Vec::new();
        write_cvm(&mut buf, &h).unwrap();
        assert_eq!(&buf[..4], b"CVM1");
        assert_eq!(&buf[4..12], &[3, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(buf.len(), 12 + 3 * 2 * 4);
        let back = read_cvm(buf.as_slice()).unwrap();
        for (a, b) in back.as_flat().iter().zip(h.as_flat()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn cvm_rejects_damage() {
        let h = CodeVectorMatrix::random(4, 3, 1).unwrap();
        let mut buf = Vec::new();
        write_cvm(&mut buf, &h).unwrap();
        assert!(read_cvm(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_cvm(extra.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_cvm(bad.as_slice()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let h = CodeVectorMatrix::random(5, 4, 2).unwrap();
        let mut buf = Vec::new();
        write_cvm_csv(&mut buf, &h).unwrap();
        assert_eq!(read_cvm_csv(buf.as_slice()).unwrap(), h);
    }

    #[test]
    fn codes_and_tree_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let h = CodeVectorMatrix::random(30, 4, 3).unwrap();
        let tree = build_code_tree(&h, &TokenizerConfig::new(2, 6)).unwrap();
        let codes = assign_codes(&tree);

        let path = dir.path().join("codes.txt");
        save_codes(&path, &codes, "h1").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("#l=2 v=6 m=30\n#config=h1\n0,"));
        let (back, hash) = load_codes(&path).unwrap();
        assert_eq!(back, codes);
        assert_eq!(hash.as_deref(), Some("h1"));

        let tpath = dir.path().join("tree.json");
        save_tree(&tpath, &tree, "h1").unwrap();
        assert!(dir.path().join("tree_centroids.cvm").exists());
        let (t2, hash) = load_tree(&tpath).unwrap();
        assert_eq!(hash, "h1");
        assert_eq!(assign_codes(&t2), codes);
    }

    #[test]
    fn codes_file_errors() {
        assert!(read_codes("0,1\n".as_bytes()).is_err());
        assert!(read_codes("#l=1 v=2 m=2\n0,1\n".as_bytes()).is_err());
        assert!(read_codes("#l=1 v=2 m=2\n0,1\n0,0\n".as_bytes()).is_err());
        assert!(read_codes("#l=1 v=2 m=2\n0,1\n1,1\n".as_bytes()).is_err());
        assert!(read_codes("#l=1 v=2 m=2\n0,1\n1,0\n".as_bytes()).is_ok());
    }

    #[test]
    fn embeddings_both_forms() {
        let samples = vec![
            Sample { id: 7, label: 0, features: vec![1.0, 2.0] },
            Sample { id: 9, label: 1, features: vec![-0.5, 0.25] },
        ];
        let mut buf = Vec::new();
        write_embeddings_csv(&mut buf, &samples).unwrap();
        assert_eq!(read_embeddings_csv(buf.as_slice()).unwrap(), samples);

        let mut cvm = Vec::new();
        write_cvm_raw(&mut cvm, 2, 2, &[1.0, 2.0, -0.5, 0.25]).unwrap();
        let index = "sample_id,label\n7,0\n9,1\n";
        assert_eq!(read_embeddings_cvm(cvm.as_slice(), index.as_bytes()).unwrap(), samples);
        assert!(read_embeddings_cvm(cvm.as_slice(), "7,0\n".as_bytes()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let model = GifModel {
            backbone: Backbone::new(&[5, 6, 4], &mut rng).unwrap(),
            heads: TokenHeads::new(2, 3, 4, 3, 16.0, &mut rng).unwrap(),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model, "cafe").unwrap();
        let (back, hash) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        assert_eq!(hash, "cafe");
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());

        let id = GifModel {
            backbone: Backbone::identity(4),
            heads: TokenHeads::new(1, 3, 4, 0, 1.0, &mut rng).unwrap(),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &id, "").unwrap();
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap().0, id);
    }

    #[test]
    fn metrics_stream() {
        let rec = MetricsRecord { step: 3, loss: 1.5, l_c: 1.0, l_ar: 0.5, token_acc: vec![0.5, 1.0], config_hash: "x".into() };
        let mut w = MetricsWriter::new(Vec::new());
        w.write(&rec).unwrap();
        w.write(&rec).unwrap();
        let buf = w.finish().unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("{\"step\":3,\"loss\":1.5,"));
        assert_eq!(read_metrics(buf.as_slice()).unwrap(), vec![rec.clone(), rec]);
    }
}
