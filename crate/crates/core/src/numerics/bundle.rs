//! Named tensor collections and their on-disk form.
//!
//! A bundle is stored as two files sharing a stem:
//!
//! * `<stem>.manifest`: UTF-8 text. Comment lines start with `#`, metadata
//!   lines look like `@key=value`, and every tensor has one line
//!   `name=<n> shape=<d0>x<d1>.. offset=<byte offset> trainable=<true|false>`.
//! * `<stem>.bin`: the tensors' values as consecutive little-endian `f64`.
//!
//! Writing is a pure function of the bundle contents, so load-then-save is
//! byte-exact.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const HEADER: &str = "# geovla bundle v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bundle {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    meta: Vec<(String, String)>,
}

/// Parameter checkpoints are bundles whose trainable flags matter.
pub type Checkpoint = Bundle;

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c == '=' || c == '#' || c == '@')
}

impl Bundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if !valid_token(name) {
            return Err(Error::Format(format!("invalid tensor name {name:?}")));
        }
        if self.index.contains_key(name) {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry { name: name.to_string(), value, trainable });
        Ok(())
    }

    /// Inserts or overwrites, keeping the original position.
    pub fn put(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        match self.index.get(name) {
            Some(&i) => {
                self.entries[i].value = value;
                self.entries[i].trainable = trainable;
                Ok(())
            }
            None => self.insert(name, value, trainable),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.position(name)
            .map(|i| &self.entries[i].value)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.position(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        Ok(&mut self.entries[i].value)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sets the trainable flag on every entry whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.entries.iter().filter(|e| !e.trainable).map(|e| e.value.len()).sum()
    }

    /// Copies every entry of `other` into `self` (overwriting same names).
    pub fn merge(&mut self, other: &Bundle) -> Result<()> {
        for e in &other.entries {
            self.put(&e.name, e.value.clone(), e.trainable)?;
        }
        Ok(())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_entries(&self) -> &[(String, String)] {
        &self.meta
    }

    /// Places every entry on `g` as a leaf; trainable entries get gradients.
    pub fn bind(&self, g: &mut Graph) -> Bound<'_> {
        self.bind_with(g, |e| e.trainable)
    }

    pub fn bind_with(&self, g: &mut Graph, wants_grad: impl Fn(&Entry) -> bool) -> Bound<'_> {
        let vars = self.entries.iter().map(|e| g.leaf(e.value.clone(), wants_grad(e))).collect();
        Bound { bundle: self, vars }
    }

    // ---- serialisation -----------------------------------------------------

    pub fn to_bytes(&self) -> Result<(String, Vec<u8>)> {
        let mut manifest = String::from(HEADER);
        manifest.push('\n');
        for (k, v) in &self.meta {
            if !valid_token(k) || v.contains('\n') {
                return Err(Error::Format(format!("invalid metadata {k:?}={v:?}")));
            }
            manifest.push_str(&format!("@{k}={v}\n"));
        }
        let mut blob = Vec::with_capacity(self.entries.iter().map(|e| e.value.len() * 8).sum());
        for e in &self.entries {
            let shape = e.value.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            manifest.push_str(&format!("name={} shape={shape} offset={} trainable={}\n", e.name, blob.len(), e.trainable));
            for v in e.value.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok((manifest, blob))
    }

    pub fn from_bytes(manifest: &str, blob: &[u8]) -> Result<Self> {
        let mut lines = manifest.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::Format("missing bundle header".into()));
        }
        let mut out = Bundle::new();
        for (lineno, line) in lines.enumerate() {
            let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", lineno + 2));
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('@') {
                let (k, v) = rest.split_once('=').ok_or_else(|| bad("metadata without '='"))?;
                out.meta.push((k.to_string(), v.to_string()));
                continue;
            }
            let mut name = None;
            let mut shape = None;
            let mut offset = None;
            let mut trainable = None;
            for field in line.split_whitespace() {
                let (k, v) = field.split_once('=').ok_or_else(|| bad("field without '='"))?;
                match k {
                    "name" => name = Some(v.to_string()),
                    "shape" => {
                        shape = Some(
                            v.split('x')
                                .map(|d| d.parse::<usize>().map_err(|_| bad("bad shape")))
                                .collect::<Result<Vec<_>>>()?,
                        )
                    }
                    "offset" => offset = Some(v.parse::<usize>().map_err(|_| bad("bad offset"))?),
                    "trainable" => {
                        trainable = Some(match v {
                            "true" => true,
                            "false" => false,
                            _ => return Err(bad("trainable must be true or false")),
                        })
                    }
                    _ => return Err(bad(&format!("unknown key {k}"))),
                }
            }
            let (Some(name), Some(shape), Some(offset), Some(trainable)) = (name, shape, offset, trainable) else {
                return Err(bad("tensor line needs name, shape, offset and trainable"));
            };
            let count: usize = shape.iter().product();
            let end = offset + count * 8;
            if end > blob.len() {
                return Err(bad("tensor extends past end of blob"));
            }
            let data = blob[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            out.insert(&name, Tensor::new(&shape, data)?, trainable)?;
        }
        Ok(out)
    }

    pub fn manifest_path(stem: &Path) -> PathBuf {
        with_suffix(stem, "manifest")
    }

    pub fn blob_path(stem: &Path) -> PathBuf {
        with_suffix(stem, "bin")
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let (manifest, blob) = self.to_bytes()?;
        if let Some(dir) = stem.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(Self::manifest_path(stem), manifest)?;
        fs::write(Self::blob_path(stem), blob)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(Self::manifest_path(stem))?;
        let blob = fs::read(Self::blob_path(stem))?;
        Self::from_bytes(&manifest, &blob)
    }
}

fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// A bundle's entries placed on a graph.
pub struct Bound<'a> {
    bundle: &'a Bundle,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.bundle
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("model parameter {name} not present")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients aligned with the bundle's entries (`None` where no gradient
    /// reached the entry or it was bound without one).
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| g.grad(v).cloned()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Bundle {
        let mut b = Bundle::new();
        b.set_meta("variant", "fused");
        b.insert("a.w", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, -0.0, 1e-300]).unwrap(), true).unwrap();
        b.insert("b", Tensor::scalar(f64::MAX), false).unwrap();
        b
    }

    #[test]
    fn manifest_layout() {
        let (m, blob) = sample().to_bytes().unwrap();
        assert_eq!(
            m,
            "# geovla bundle v1\n@variant=fused\nname=a.w shape=2x3 offset=0 trainable=true\nname=b shape=1 offset=48 trainable=false\n"
        );
        assert_eq!(blob.len(), 56);
        assert_eq!(&blob[..8], &1.0f64.to_le_bytes());
    }

    #[test]
    fn file_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        let b = sample();
        b.save(&stem).unwrap();
        let loaded = Bundle::load(&stem).unwrap();
        assert_eq!(loaded, b);
        let stem2 = dir.path().join("ck2");
        loaded.save(&stem2).unwrap();
        assert_eq!(fs::read(Bundle::blob_path(&stem)).unwrap(), fs::read(Bundle::blob_path(&stem2)).unwrap());
        assert_eq!(
            fs::read(Bundle::manifest_path(&stem)).unwrap(),
            fs::read(Bundle::manifest_path(&stem2)).unwrap()
        );
    }

    #[test]
    fn rejects_bad_manifests() {
        assert!(Bundle::from_bytes("nope\n", &[]).is_err());
        assert!(Bundle::from_bytes("# geovla bundle v1\nname=a shape=2 offset=0 trainable=true\n", &[0; 8]).is_err());
        assert!(Bundle::from_bytes("# geovla bundle v1\nname=a shape=1 offset=0\n", &[0; 8]).is_err());
        let mut b = Bundle::new();
        assert!(b.insert("has space", Tensor::scalar(0.0), true).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_values_round_trip(vals in proptest::collection::vec(any::<f64>(), 1..40), flag: bool) {
            let mut b = Bundle::new();
            b.insert("x", Tensor::new(&[vals.len()], vals.clone()).unwrap(), flag).unwrap();
            let (m, blob) = b.to_bytes().unwrap();
            let back = Bundle::from_bytes(&m, &blob).unwrap();
            let (m2, blob2) = back.to_bytes().unwrap();
            prop_assert_eq!(m, m2);
            prop_assert_eq!(blob, blob2);
        }
    }
}
