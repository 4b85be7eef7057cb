//! Directory-backed, schema-free entry storage.
//!
//! Layout on disk (stable, shared between tools):
//!
//! ```text
//! .cmr/<module>/<uid>/meta.json
//! .cmr/<module>/<uid>/files/<name>
//! .cmr/<module>/<uid>/.lock
//! ```
//!
//! Entries are addressed by cID `<module>:<alias-or-uid>`. The alias lives
//! inside the meta under the reserved key `cm_alias`; `cm_modified_at`
//! (UTC seconds) and `cm_conflicts` (merge archive) are the other reserved
//! keys. Searches are backed by a per-module cache under `.cmr/.index/`,
//! rebuilt whenever the stat stamps of the module's meta files changed, so
//! results are always equivalent to a full linear scan.

use crate::error::{CmError, Result};
use crate::meta::{canonical_json, parse_key_path, MetaDocument};
use rand::RngCore;
use serde_json::{Map, Value};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

pub const CMR_DIR: &str = ".cmr";
pub const META_FILE: &str = "meta.json";
pub const FILES_DIR: &str = "files";
pub const LOCK_FILE: &str = ".lock";
const INDEX_DIR: &str = ".index";

/// Reserved meta keys.
pub const KEY_ALIAS: &str = "cm_alias";
pub const KEY_MODIFIED_AT: &str = "cm_modified_at";
pub const KEY_CONFLICTS: &str = "cm_conflicts";

/// Well-known uid of the repository descriptor entry, identical in every
/// repository so merges recognize descriptors as the same logical entry.
const DESCRIPTOR_UID: &str = "0000000000000000";

// ---------------------------------------------------------------------------
// identifiers

/// 16 lowercase hex chars: 16 bits of wall-clock seconds followed by 48
/// random bits. Collisions are handled by regenerating at mint time.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Uid(String);

impl Uid {
    pub fn generate() -> Uid {
        let secs = now_secs();
        let mut rng = rand::rng();
        let rand48 = rng.next_u64() & 0x0000_ffff_ffff_ffff;
        Uid(format!("{:04x}{:012x}", (secs & 0xffff) as u16, rand48))
    }

    pub fn parse(s: &str) -> Result<Uid> {
        if is_uid_str(s) {
            Ok(Uid(s.to_string()))
        } else {
            Err(CmError::Validation(format!("invalid uid `{s}`")))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for Uid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn is_uid_str(s: &str) -> bool {
    s.len() == 16
        && s.bytes()
            .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// Alias-or-uid reference: `[A-Za-z0-9_.-]{1,64}`, no `:` or path separators.
pub fn is_valid_ref(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 64
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'.' || b == b'-')
        && s != "."
        && s != ".."
}

fn validate_ref(kind: &str, s: &str) -> Result<()> {
    if is_valid_ref(s) {
        Ok(())
    } else {
        Err(CmError::Validation(format!("invalid {kind} ref `{s}`")))
    }
}

/// Collective ID: `<module>:<entry>`, each side an alias or uid.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cid {
    pub module: String,
    pub entry: String,
}

impl Cid {
    pub fn new(module: impl Into<String>, entry: impl Into<String>) -> Result<Cid> {
        let cid = Cid {
            module: module.into(),
            entry: entry.into(),
        };
        validate_ref("module", &cid.module)?;
        validate_ref("entry", &cid.entry)?;
        Ok(cid)
    }

    pub fn parse(s: &str) -> Result<Cid> {
        match s.split_once(':') {
            Some((m, e)) => Cid::new(m, e),
            None => Err(CmError::Validation(format!(
                "cid `{s}` must be <module>:<entry>"
            ))),
        }
    }
}

impl std::fmt::Display for Cid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.module, self.entry)
    }
}

// ---------------------------------------------------------------------------
// entries

/// One persisted repository entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub module: String,
    pub uid: Uid,
    pub alias: Option<String>,
    /// Full stored document, reserved keys included.
    pub meta: MetaDocument,
    pub files: BTreeMap<String, Vec<u8>>,
    /// UTC seconds.
    pub modified_at: u64,
}

impl Entry {
    pub fn cid(&self) -> Cid {
        Cid {
            module: self.module.clone(),
            entry: self
                .alias
                .clone()
                .unwrap_or_else(|| self.uid.as_str().to_string()),
        }
    }

    /// Canonical content key used by merge: meta minus `cm_modified_at`,
    /// plus file names and bytes.
    fn content_key(&self) -> String {
        let mut m = self.meta.clone();
        m.remove(KEY_MODIFIED_AT);
        let mut key = m.to_canonical_string();
        for (name, bytes) in &self.files {
            key.push('\0');
            key.push_str(name);
            key.push('\0');
            key.push_str(&format!("{:x}", fxhash(bytes)));
        }
        key
    }
}

// small local hash, only used to compare blob contents cheaply
fn fxhash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Default)]
pub struct SaveOptions {
    pub alias: Option<String>,
    /// Fixed uid (used by merge, remote submission, and idempotent re-saves).
    pub uid: Option<Uid>,
    /// Override of `cm_modified_at`; defaults to the current time.
    pub modified_at: Option<u64>,
}

impl SaveOptions {
    pub fn with_alias(alias: impl Into<String>) -> SaveOptions {
        SaveOptions {
            alias: Some(alias.into()),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MergeReport {
    pub added: usize,
    pub identical: usize,
    pub conflicts: usize,
}

/// Search comparators. Entries lacking the key path never match, whatever
/// the comparator; values of different kinds never match either.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparator {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Contains,
}

impl Comparator {
    pub fn parse(s: &str) -> Result<Comparator> {
        Ok(match s {
            "eq" => Comparator::Eq,
            "ne" => Comparator::Ne,
            "lt" => Comparator::Lt,
            "le" => Comparator::Le,
            "gt" => Comparator::Gt,
            "ge" => Comparator::Ge,
            "contains" => Comparator::Contains,
            other => {
                return Err(CmError::Validation(format!("unknown comparator `{other}`")))
            }
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Comparator::Eq => "eq",
            Comparator::Ne => "ne",
            Comparator::Lt => "lt",
            Comparator::Le => "le",
            Comparator::Gt => "gt",
            Comparator::Ge => "ge",
            Comparator::Contains => "contains",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SearchPredicate {
    pub path: String,
    pub op: Comparator,
    pub value: Value,
}

impl SearchPredicate {
    pub fn new(path: impl Into<String>, op: Comparator, value: Value) -> SearchPredicate {
        SearchPredicate {
            path: path.into(),
            op,
            value,
        }
    }

    pub fn matches(&self, meta: &MetaDocument) -> Result<bool> {
        let actual = meta.get(&self.path)?;
        Ok(match actual {
            None => false,
            Some(v) => compare_values(self.op, v, &self.value),
        })
    }
}

pub fn compare_values(op: Comparator, actual: &Value, expected: &Value) -> bool {
    use Comparator::*;
    match (actual, expected) {
        (Value::Number(a), Value::Number(b)) => {
            let (a, b) = match (a.as_f64(), b.as_f64()) {
                (Some(a), Some(b)) => (a, b),
                _ => return false,
            };
            match op {
                Eq => a == b,
                Ne => a != b,
                Lt => a < b,
                Le => a <= b,
                Gt => a > b,
                Ge => a >= b,
                Contains => false,
            }
        }
        (Value::String(a), Value::String(b)) => match op {
            Eq => a == b,
            Ne => a != b,
            Lt => a < b,
            Le => a <= b,
            Gt => a > b,
            Ge => a >= b,
            Contains => a.contains(b.as_str()),
        },
        (Value::Bool(a), Value::Bool(b)) => match op {
            Eq => a == b,
            Ne => a != b,
            _ => false,
        },
        (Value::Null, Value::Null) => matches!(op, Eq | Le | Ge),
        (Value::Array(items), needle) => match op {
            Contains => items.iter().any(|it| values_equal(it, needle)),
            _ => false,
        },
        _ => false,
    }
}

fn values_equal(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => match (x.as_f64(), y.as_f64()) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        },
        _ => a == b,
    }
}

// ---------------------------------------------------------------------------
// repository handle

#[derive(Debug, Clone)]
pub struct Repo {
    root: PathBuf,
}

impl Repo {
    /// Creates (or re-opens) a repository at `path`. Idempotent: re-running
    /// on an initialized directory changes nothing.
    pub fn init(path: &Path) -> Result<Repo> {
        if path.exists() && !path.is_dir() {
            return Err(CmError::NotADirectory(path.display().to_string()));
        }
        fs::create_dir_all(path).map_err(|e| CmError::io(path.display().to_string(), e))?;
        let cmr = path.join(CMR_DIR);
        fs::create_dir_all(&cmr).map_err(|e| CmError::io(cmr.display().to_string(), e))?;
        let repo = Repo {
            root: path.to_path_buf(),
        };
        // repository descriptor entry, created once
        if repo.resolve_alias("repo", "default")?.is_none() {
            repo.save(
                "repo",
                SaveOptions {
                    alias: Some("default".into()),
                    uid: Some(Uid(DESCRIPTOR_UID.into())),
                    modified_at: Some(0),
                },
                crate::meta!({"repo_format": 1}),
                &[],
            )?;
        }
        Ok(repo)
    }

    /// Opens an existing repository (a directory containing `.cmr/`).
    pub fn open(path: &Path) -> Result<Repo> {
        let cmr = path.join(CMR_DIR);
        if cmr.is_dir() {
            Ok(Repo {
                root: path.to_path_buf(),
            })
        } else {
            Err(CmError::NotFound(format!(
                "no {CMR_DIR} under {}",
                path.display()
            )))
        }
    }

    /// Walks up from `start` looking for a directory containing `.cmr/`.
    pub fn discover(start: &Path) -> Option<Repo> {
        let mut cur = Some(start);
        while let Some(dir) = cur {
            if dir.join(CMR_DIR).is_dir() {
                return Some(Repo {
                    root: dir.to_path_buf(),
                });
            }
            cur = dir.parent();
        }
        None
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn cmr_dir(&self) -> PathBuf {
        self.root.join(CMR_DIR)
    }

    fn module_dir(&self, module: &str) -> PathBuf {
        self.cmr_dir().join(module)
    }

    fn entry_dir(&self, module: &str, uid: &Uid) -> PathBuf {
        self.module_dir(module).join(uid.as_str())
    }

    fn index_path(&self, module: &str) -> PathBuf {
        self.cmr_dir().join(INDEX_DIR).join(format!("{module}.json"))
    }

    // -- save ---------------------------------------------------------------

    pub fn save(
        &self,
        module: &str,
        opts: SaveOptions,
        meta: MetaDocument,
        files: &[(String, Vec<u8>)],
    ) -> Result<Cid> {
        validate_ref("module", module)?;
        if let Some(alias) = &opts.alias {
            validate_ref("alias", alias)?;
            if is_uid_str(alias) {
                return Err(CmError::AliasConflict(format!(
                    "alias `{alias}` is indistinguishable from a uid"
                )));
            }
        }
        let module_dir = self.module_dir(module);
        fs::create_dir_all(&module_dir)
            .map_err(|e| CmError::io(module_dir.display().to_string(), e))?;

        // alias-keyed saves take a short module-level lock so two writers
        // cannot mint two uids for one alias
        let _module_lock = match &opts.alias {
            Some(_) if opts.uid.is_none() => Some(Lock::acquire(&module_dir)?),
            _ => None,
        };

        let uid = match (&opts.uid, &opts.alias) {
            (Some(uid), _) => {
                let dir = self.entry_dir(module, uid);
                if !dir.exists() {
                    fs::create_dir_all(&dir)
                        .map_err(|e| CmError::io(dir.display().to_string(), e))?;
                }
                uid.clone()
            }
            (None, Some(alias)) => match self.resolve_alias(module, alias)? {
                Some(uid) => uid,
                None => self.mint_entry_dir(module)?,
            },
            (None, None) => self.mint_entry_dir(module)?,
        };

        let dir = self.entry_dir(module, &uid);
        let _entry_lock = Lock::acquire(&dir)?;

        let mut stored = meta;
        match &opts.alias {
            Some(alias) => stored.insert(KEY_ALIAS, Value::from(alias.clone())),
            // the alias is owned by SaveOptions; never smuggled in via meta
            None => {
                stored.remove(KEY_ALIAS);
            }
        }
        let modified_at = opts
            .modified_at
            .or_else(|| stored.get(KEY_MODIFIED_AT).ok().flatten().and_then(Value::as_u64))
            .unwrap_or_else(now_secs);
        stored.insert(KEY_MODIFIED_AT, Value::from(modified_at));

        write_atomic(&dir.join(META_FILE), stored.to_canonical_string().as_bytes())?;
        if !files.is_empty() {
            let files_dir = dir.join(FILES_DIR);
            fs::create_dir_all(&files_dir)
                .map_err(|e| CmError::io(files_dir.display().to_string(), e))?;
            for (name, bytes) in files {
                if name.contains('/') || name.contains('\\') || name.starts_with('.') {
                    return Err(CmError::Validation(format!("invalid file name `{name}`")));
                }
                write_atomic(&files_dir.join(name), bytes)?;
            }
        }
        self.invalidate_index(module);
        Ok(Cid {
            module: module.to_string(),
            entry: opts
                .alias
                .clone()
                .unwrap_or_else(|| uid.as_str().to_string()),
        })
    }

    fn mint_entry_dir(&self, module: &str) -> Result<Uid> {
        loop {
            let uid = Uid::generate();
            let dir = self.entry_dir(module, &uid);
            match fs::create_dir(&dir) {
                Ok(()) => return Ok(uid),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(CmError::io(dir.display().to_string(), e)),
            }
        }
    }

    // -- load ---------------------------------------------------------------

    pub fn load(&self, cid: &Cid) -> Result<Entry> {
        let module_dir = self.module_dir(&cid.module);
        if !module_dir.is_dir() {
            return Err(CmError::NotFound(format!("module `{}`", cid.module)));
        }
        let uid = self.resolve_entry(&cid.module, &cid.entry)?;
        self.load_by_uid(&cid.module, &uid)
    }

    fn load_by_uid(&self, module: &str, uid: &Uid) -> Result<Entry> {
        let dir = self.entry_dir(module, uid);
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CmError::NotFound(format!("entry `{module}:{uid}`"))
            } else {
                CmError::io(meta_path.display().to_string(), e)
            }
        })?;
        let meta = MetaDocument::parse(&text).map_err(|e| CmError::CorruptMeta {
            path: meta_path.display().to_string(),
            detail: e.to_string(),
        })?;
        let alias = meta
            .get(KEY_ALIAS)
            .ok()
            .flatten()
            .and_then(Value::as_str)
            .map(str::to_string);
        let modified_at = meta
            .get(KEY_MODIFIED_AT)
            .ok()
            .flatten()
            .and_then(Value::as_u64)
            .unwrap_or(0);
        let mut blobs = BTreeMap::new();
        let files_dir = dir.join(FILES_DIR);
        if files_dir.is_dir() {
            let rd = fs::read_dir(&files_dir)
                .map_err(|e| CmError::io(files_dir.display().to_string(), e))?;
            for item in rd {
                let item = item.map_err(|e| CmError::io(files_dir.display().to_string(), e))?;
                if item.path().is_file() {
                    let bytes = fs::read(item.path())
                        .map_err(|e| CmError::io(item.path().display().to_string(), e))?;
                    blobs.insert(item.file_name().to_string_lossy().into_owned(), bytes);
                }
            }
        }
        Ok(Entry {
            module: module.to_string(),
            uid: uid.clone(),
            alias,
            meta,
            files: blobs,
            modified_at,
        })
    }

    fn resolve_entry(&self, module: &str, entry_ref: &str) -> Result<Uid> {
        if is_uid_str(entry_ref) {
            let uid = Uid(entry_ref.to_string());
            if self.entry_dir(module, &uid).join(META_FILE).is_file() {
                return Ok(uid);
            }
        }
        self.resolve_alias(module, entry_ref)?
            .ok_or_else(|| CmError::NotFound(format!("entry `{module}:{entry_ref}`")))
    }

    fn resolve_alias(&self, module: &str, alias: &str) -> Result<Option<Uid>> {
        if !self.module_dir(module).is_dir() {
            return Ok(None);
        }
        for (uid, meta) in self.module_docs(module)? {
            if meta.get(KEY_ALIAS).ok().flatten().and_then(Value::as_str) == Some(alias) {
                return Ok(Some(uid));
            }
        }
        Ok(None)
    }

    // -- listing and search ---------------------------------------------------

    /// Module names present in the repository, sorted.
    pub fn modules(&self) -> Result<Vec<String>> {
        let cmr = self.cmr_dir();
        let mut out = Vec::new();
        let rd = match fs::read_dir(&cmr) {
            Ok(rd) => rd,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(CmError::io(cmr.display().to_string(), e)),
        };
        for item in rd {
            let item = item.map_err(|e| CmError::io(cmr.display().to_string(), e))?;
            let name = item.file_name().to_string_lossy().into_owned();
            if item.path().is_dir() && !name.starts_with('.') {
                out.push(name);
            }
        }
        out.sort();
        Ok(out)
    }

    /// All entries of `module`, sorted by (alias, uid). Unknown modules
    /// yield an empty list.
    pub fn list(&self, module: &str) -> Result<Vec<Cid>> {
        if !self.module_dir(module).is_dir() {
            return Ok(Vec::new());
        }
        let mut rows: Vec<(Option<String>, Uid)> = self
            .module_docs(module)?
            .into_iter()
            .map(|(uid, meta)| {
                let alias = meta
                    .get(KEY_ALIAS)
                    .ok()
                    .flatten()
                    .and_then(Value::as_str)
                    .map(str::to_string);
                (alias, uid)
            })
            .collect();
        rows.sort();
        Ok(rows
            .into_iter()
            .map(|(alias, uid)| Cid {
                module: module.to_string(),
                entry: alias.unwrap_or_else(|| uid.as_str().to_string()),
            })
            .collect())
    }

    /// Entries whose meta satisfies every predicate. `module == None` scans
    /// all modules. Result order equals [`Repo::list`] order per module.
    pub fn search(
        &self,
        module: Option<&str>,
        predicates: &[SearchPredicate],
    ) -> Result<Vec<Cid>> {
        for p in predicates {
            parse_key_path(&p.path)?;
        }
        let modules = match module {
            Some(m) => vec![m.to_string()],
            None => self.modules()?,
        };
        let mut out = Vec::new();
        for m in modules {
            if !self.module_dir(&m).is_dir() {
                continue;
            }
            let mut rows: Vec<(Option<String>, Uid)> = Vec::new();
            for (uid, meta) in self.module_docs(&m)? {
                let mut all = true;
                for p in predicates {
                    if !p.matches(&meta)? {
                        all = false;
                        break;
                    }
                }
                if all {
                    let alias = meta
                        .get(KEY_ALIAS)
                        .ok()
                        .flatten()
                        .and_then(Value::as_str)
                        .map(str::to_string);
                    rows.push((alias, uid));
                }
            }
            rows.sort();
            out.extend(rows.into_iter().map(|(alias, uid)| Cid {
                module: m.clone(),
                entry: alias.unwrap_or_else(|| uid.as_str().to_string()),
            }));
        }
        Ok(out)
    }

    // -- index cache ----------------------------------------------------------

    /// Parsed meta documents of every entry in `module`, via the stat-stamped
    /// cache under `.cmr/.index/`. Corrupt meta files surface as errors, never
    /// as silently skipped entries.
    fn module_docs(&self, module: &str) -> Result<Vec<(Uid, MetaDocument)>> {
        let stamp = self.module_stamp(module)?;
        let index_path = self.index_path(module);
        if let Some(docs) = read_index_if_fresh(&index_path, &stamp) {
            return Ok(docs);
        }
        let mut docs = Vec::new();
        for uid in stamp.keys() {
            let entry = self.load_by_uid(module, &Uid(uid.clone()))?;
            docs.push((entry.uid, entry.meta));
        }
        write_index(&index_path, &stamp, &docs);
        Ok(docs)
    }

    /// uid -> (mtime ns, len) of each meta.json; the staleness fingerprint.
    fn module_stamp(&self, module: &str) -> Result<BTreeMap<String, (u128, u64)>> {
        let dir = self.module_dir(module);
        let mut stamp = BTreeMap::new();
        let rd = fs::read_dir(&dir).map_err(|e| CmError::io(dir.display().to_string(), e))?;
        for item in rd {
            let item = item.map_err(|e| CmError::io(dir.display().to_string(), e))?;
            let name = item.file_name().to_string_lossy().into_owned();
            if !item.path().is_dir() || !is_uid_str(&name) {
                continue;
            }
            let meta_path = item.path().join(META_FILE);
            match fs::metadata(&meta_path) {
                Ok(md) => {
                    let mtime = md
                        .modified()
                        .ok()
                        .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
                        .map(|d| d.as_nanos())
                        .unwrap_or(0);
                    stamp.insert(name, (mtime, md.len()));
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    // dir minted but meta not yet written; treat as absent
                }
                Err(e) => return Err(CmError::io(meta_path.display().to_string(), e)),
            }
        }
        Ok(stamp)
    }

    fn invalidate_index(&self, module: &str) {
        let _ = fs::remove_file(self.index_path(module));
    }

    // -- merge ----------------------------------------------------------------

    /// Merges every entry of `src` into `self`. Union by (module, uid);
    /// identical content is skipped; conflicting content is resolved by the
    /// newest `cm_modified_at` (canonical-text tie-break) and the loser's
    /// meta is archived under `cm_conflicts` in the winner.
    pub fn merge_from(&self, src: &Repo) -> Result<MergeReport> {
        let mut report = MergeReport::default();
        for module in src.modules()? {
            // alias -> uid map of dst, maintained as entries land
            let mut dst_aliases: BTreeMap<String, Uid> = BTreeMap::new();
            if self.module_dir(&module).is_dir() {
                for (uid, meta) in self.module_docs(&module)? {
                    if let Some(a) = meta.get(KEY_ALIAS).ok().flatten().and_then(Value::as_str) {
                        dst_aliases.insert(a.to_string(), uid);
                    }
                }
            }
            for (uid, _) in src.module_docs(&module)? {
                let incoming = src.load_by_uid(&module, &uid)?;
                let existing = if self.entry_dir(&module, &uid).join(META_FILE).is_file() {
                    Some(self.load_by_uid(&module, &uid)?)
                } else {
                    None
                };
                match existing {
                    None => {
                        let mut e = incoming;
                        if let Some(alias) = e.alias.clone() {
                            if let Some(holder) = dst_aliases.get(&alias) {
                                if holder != &e.uid {
                                    e = self.resolve_alias_clash(&module, holder, e, &alias)?;
                                    report.conflicts += 1;
                                }
                            }
                        }
                        if let Some(a) = e.alias.clone() {
                            dst_aliases.insert(a, e.uid.clone());
                        }
                        self.write_entry(&e)?;
                        report.added += 1;
                    }
                    Some(current) => {
                        if current.content_key() == incoming.content_key() {
                            report.identical += 1;
                        } else {
                            let incoming_wins = (incoming.modified_at, incoming.content_key())
                                > (current.modified_at, current.content_key());
                            let (mut winner, loser) = if incoming_wins {
                                (incoming, current)
                            } else {
                                (current, incoming)
                            };
                            archive_conflict(&mut winner.meta, &loser.meta);
                            for (name, bytes) in loser.files {
                                winner.files.entry(name).or_insert(bytes);
                            }
                            self.write_entry(&winner)?;
                            report.conflicts += 1;
                        }
                    }
                }
            }
        }
        Ok(report)
    }

    /// Two different uids claim one alias: the newer keeps it, the other
    /// records the dropped alias in its conflict archive.
    fn resolve_alias_clash(
        &self,
        module: &str,
        holder_uid: &Uid,
        mut incoming: Entry,
        alias: &str,
    ) -> Result<Entry> {
        let holder = self.load_by_uid(module, holder_uid)?;
        if incoming.modified_at > holder.modified_at {
            let mut stripped = holder;
            stripped.meta.remove(KEY_ALIAS);
            stripped.alias = None;
            note_dropped_alias(&mut stripped.meta, alias);
            self.write_entry(&stripped)?;
        } else {
            incoming.meta.remove(KEY_ALIAS);
            incoming.alias = None;
            note_dropped_alias(&mut incoming.meta, alias);
        }
        Ok(incoming)
    }

    /// Writes an entry verbatim (uid, alias, timestamp preserved).
    fn write_entry(&self, e: &Entry) -> Result<()> {
        let mut meta = e.meta.clone();
        meta.remove(KEY_ALIAS);
        meta.remove(KEY_MODIFIED_AT);
        let files: Vec<(String, Vec<u8>)> = e
            .files
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        self.save(
            &e.module,
            SaveOptions {
                alias: e.alias.clone(),
                uid: Some(e.uid.clone()),
                modified_at: Some(e.modified_at),
            },
            meta,
            &files,
        )?;
        Ok(())
    }
}

fn note_dropped_alias(meta: &mut MetaDocument, alias: &str) {
    let mut note = Map::new();
    note.insert("cm_dropped_alias".into(), Value::from(alias));
    push_conflict(meta, Value::Object(note));
}

fn archive_conflict(winner: &mut MetaDocument, loser: &MetaDocument) {
    push_conflict(winner, loser.clone().into_value());
}

fn push_conflict(meta: &mut MetaDocument, record: Value) {
    let list = meta
        .as_map_mut()
        .entry(KEY_CONFLICTS)
        .or_insert_with(|| Value::Array(Vec::new()));
    if let Value::Array(items) = list {
        if !items.iter().any(|it| it == &record) {
            items.push(record);
        }
    }
}

// ---------------------------------------------------------------------------
// index file helpers

fn read_index_if_fresh(
    path: &Path,
    stamp: &BTreeMap<String, (u128, u64)>,
) -> Option<Vec<(Uid, MetaDocument)>> {
    let text = fs::read_to_string(path).ok()?;
    let doc: Value = serde_json::from_str(&text).ok()?;
    let stored_stamp = doc.get("stamp")?.as_object()?;
    if stored_stamp.len() != stamp.len() {
        return None;
    }
    for (uid, (mtime, len)) in stamp {
        let row = stored_stamp.get(uid)?.as_array()?;
        if row.len() != 2
            || row[0].as_str()? != mtime.to_string()
            || row[1].as_u64()? != *len
        {
            return None;
        }
    }
    let docs = doc.get("docs")?.as_object()?;
    let mut out = Vec::new();
    for (uid, meta) in docs {
        out.push((
            Uid(uid.clone()),
            MetaDocument::from_value(meta.clone()).ok()?,
        ));
    }
    Some(out)
}

fn write_index(path: &Path, stamp: &BTreeMap<String, (u128, u64)>, docs: &[(Uid, MetaDocument)]) {
    let mut stamp_map = Map::new();
    for (uid, (mtime, len)) in stamp {
        stamp_map.insert(
            uid.clone(),
            Value::Array(vec![Value::from(mtime.to_string()), Value::from(*len)]),
        );
    }
    let mut docs_map = Map::new();
    for (uid, meta) in docs {
        docs_map.insert(uid.as_str().to_string(), meta.clone().into_value());
    }
    let mut root = Map::new();
    root.insert("stamp".into(), Value::Object(stamp_map));
    root.insert("docs".into(), Value::Object(docs_map));
    // best effort cache: failures just mean the next search rescans
    if let Some(parent) = path.parent() {
        if fs::create_dir_all(parent).is_err() {
            return;
        }
    }
    let _ = write_atomic(path, canonical_json(&Value::Object(root)).as_bytes());
}

// ---------------------------------------------------------------------------
// filesystem helpers

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
        std::process::id()
    ));
    let mut f =
        fs::File::create(&tmp).map_err(|e| CmError::io(tmp.display().to_string(), e))?;
    f.write_all(bytes)
        .map_err(|e| CmError::io(tmp.display().to_string(), e))?;
    f.sync_all().ok();
    fs::rename(&tmp, path).map_err(|e| CmError::io(path.display().to_string(), e))?;
    Ok(())
}

pub(crate) fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Per-directory advisory lock: `.lock` created with O_EXCL, bounded retry,
/// stale locks broken after 10s.
struct Lock {
    path: PathBuf,
}

impl Lock {
    fn acquire(dir: &Path) -> Result<Lock> {
        let path = dir.join(LOCK_FILE);
        let deadline = std::time::Instant::now() + Duration::from_secs(5);
        loop {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(_) => return Ok(Lock { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if let Ok(md) = fs::metadata(&path) {
                        if let Ok(age) = md.modified().and_then(|t| {
                            SystemTime::now()
                                .duration_since(t)
                                .map_err(|e| std::io::Error::other(e.to_string()))
                        }) {
                            if age > Duration::from_secs(10) {
                                let _ = fs::remove_file(&path);
                                continue;
                            }
                        }
                    }
                    if std::time::Instant::now() >= deadline {
                        return Err(CmError::LockBusy(path.display().to_string()));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(CmError::io(path.display().to_string(), e)),
            }
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta;
    use tempfile::TempDir;

    fn fresh() -> (TempDir, Repo) {
        let dir = TempDir::new().unwrap();
        let repo = Repo::init(dir.path()).unwrap();
        (dir, repo)
    }

    #[test]
    fn init_creates_cmr_and_is_idempotent() {
        let (dir, repo) = fresh();
        assert!(dir.path().join(CMR_DIR).is_dir());
        assert_eq!(repo.list("dataset").unwrap(), vec![]);
        let before = repo.list("repo").unwrap();
        let repo2 = Repo::init(dir.path()).unwrap();
        assert_eq!(repo2.list("repo").unwrap(), before);
        assert_eq!(before.len(), 1, "exactly one descriptor entry");
    }

    #[test]
    fn init_on_file_path_is_not_a_directory() {
        let dir = TempDir::new().unwrap();
        let file = dir.path().join("plain.txt");
        fs::write(&file, b"x").unwrap();
        assert!(matches!(
            Repo::init(&file),
            Err(CmError::NotADirectory(_))
        ));
    }

    #[test]
    fn init_on_read_only_dir_is_permission_denied() {
        use std::os::unix::fs::PermissionsExt;
        let dir = TempDir::new().unwrap();
        let ro = dir.path().join("ro");
        fs::create_dir(&ro).unwrap();
        fs::set_permissions(&ro, fs::Permissions::from_mode(0o555)).unwrap();
        // privileged processes bypass the mode bits; only assert when they apply
        if fs::write(ro.join("probe"), b"x").is_ok() {
            return;
        }
        assert!(matches!(Repo::init(&ro), Err(CmError::PermissionDenied(_))));
    }

    #[test]
    fn save_creates_directory_layout() {
        let (dir, repo) = fresh();
        let cid = repo
            .save(
                "dataset",
                SaveOptions::with_alias("m1024"),
                meta!({"size": 1024}),
                &[],
            )
            .unwrap();
        assert_eq!(cid.to_string(), "dataset:m1024");
        let entry = repo.load(&cid).unwrap();
        let on_disk = dir
            .path()
            .join(CMR_DIR)
            .join("dataset")
            .join(entry.uid.as_str())
            .join(META_FILE);
        assert!(on_disk.is_file());
        assert_eq!(entry.meta.get("size").unwrap(), Some(&Value::from(1024)));
        assert_eq!(entry.alias.as_deref(), Some("m1024"));
    }

    #[test]
    fn saving_same_alias_twice_replaces_meta_and_keeps_uid() {
        let (_dir, repo) = fresh();
        let c1 = repo
            .save("dataset", SaveOptions::with_alias("a"), meta!({"v": 1}), &[])
            .unwrap();
        let uid1 = repo.load(&c1).unwrap().uid;
        let c2 = repo
            .save("dataset", SaveOptions::with_alias("a"), meta!({"v": 2}), &[])
            .unwrap();
        let e2 = repo.load(&c2).unwrap();
        assert_eq!(e2.uid, uid1);
        assert_eq!(e2.meta.get("v").unwrap(), Some(&Value::from(2)));
        assert_eq!(repo.list("dataset").unwrap().len(), 1);
    }

    #[test]
    fn empty_meta_is_valid() {
        let (_dir, repo) = fresh();
        let cid = repo
            .save("dataset", SaveOptions::with_alias("e"), MetaDocument::new(), &[])
            .unwrap();
        let e = repo.load(&cid).unwrap();
        assert_eq!(
            e.meta.get(KEY_ALIAS).unwrap(),
            Some(&Value::from("e")),
            "alias stored inside meta"
        );
        // nothing besides the reserved keys
        let keys: Vec<&String> = e.meta.as_map().keys().collect();
        assert_eq!(keys, vec![KEY_ALIAS, KEY_MODIFIED_AT]);
    }

    #[test]
    fn load_by_alias_and_uid_agree() {
        let (_dir, repo) = fresh();
        let cid = repo
            .save("dataset", SaveOptions::with_alias("x"), meta!({"k": [1, 2]}), &[])
            .unwrap();
        let by_alias = repo.load(&cid).unwrap();
        let by_uid = repo
            .load(&Cid::new("dataset", by_alias.uid.as_str()).unwrap())
            .unwrap();
        assert_eq!(by_alias, by_uid);
    }

    #[test]
    fn load_missing_entry_is_not_found() {
        let (_dir, repo) = fresh();
        repo.save("dataset", SaveOptions::default(), meta!({}), &[])
            .unwrap();
        assert!(matches!(
            repo.load(&Cid::new("dataset", "zzz").unwrap()),
            Err(CmError::NotFound(_))
        ));
        assert!(matches!(
            repo.load(&Cid::new("nosuch", "zzz").unwrap()),
            Err(CmError::NotFound(_))
        ));
    }

    #[test]
    fn nested_meta_round_trips_through_disk() {
        let (_dir, repo) = fresh();
        let doc = meta!({"a": {"b": {"c": [1, 2.5, "s", null, true]}}});
        let cid = repo
            .save("dataset", SaveOptions::with_alias("deep"), doc.clone(), &[])
            .unwrap();
        let loaded = repo.load(&cid).unwrap();
        assert_eq!(loaded.meta.get("a").unwrap(), doc.get("a").unwrap());
    }

    #[test]
    fn corrupt_meta_is_an_error_not_a_skip() {
        let (dir, repo) = fresh();
        let cid = repo
            .save("dataset", SaveOptions::with_alias("ok"), meta!({"x": 1}), &[])
            .unwrap();
        let uid = repo.load(&cid).unwrap().uid;
        let meta_path = dir
            .path()
            .join(CMR_DIR)
            .join("dataset")
            .join(uid.as_str())
            .join(META_FILE);
        fs::write(&meta_path, b"{ not json").unwrap();
        assert!(matches!(
            repo.load(&cid),
            Err(CmError::CorruptMeta { .. })
        ));
        assert!(matches!(
            repo.search(Some("dataset"), &[]),
            Err(CmError::CorruptMeta { .. })
        ));
    }

    #[test]
    fn list_is_deterministic() {
        let (_dir, repo) = fresh();
        for a in ["c", "a", "b"] {
            repo.save("dataset", SaveOptions::with_alias(a), meta!({}), &[])
                .unwrap();
        }
        let l1 = repo.list("dataset").unwrap();
        let l2 = repo.list("dataset").unwrap();
        assert_eq!(l1, l2);
        let names: Vec<String> = l1.into_iter().map(|c| c.entry).collect();
        assert_eq!(names, vec!["a", "b", "c"]);
    }

    #[test]
    fn search_matches_size_predicate() {
        let (_dir, repo) = fresh();
        for (alias, size) in [("s10", 10), ("s100", 100), ("s1000", 1000)] {
            repo.save(
                "dataset",
                SaveOptions::with_alias(alias),
                meta!({"size": size}),
                &[],
            )
            .unwrap();
        }
        let hits = repo
            .search(
                Some("dataset"),
                &[SearchPredicate::new("size", Comparator::Gt, Value::from(50))],
            )
            .unwrap();
        let names: Vec<String> = hits.into_iter().map(|c| c.entry).collect();
        assert_eq!(names, vec!["s100", "s1000"]);
    }

    #[test]
    fn empty_predicates_equal_list() {
        let (_dir, repo) = fresh();
        for a in ["x", "y"] {
            repo.save("dataset", SaveOptions::with_alias(a), meta!({"v": 1}), &[])
                .unwrap();
        }
        assert_eq!(
            repo.search(Some("dataset"), &[]).unwrap(),
            repo.list("dataset").unwrap()
        );
    }

    #[test]
    fn missing_key_never_matches() {
        let (_dir, repo) = fresh();
        repo.save("dataset", SaveOptions::with_alias("a"), meta!({"x": 1}), &[])
            .unwrap();
        for op in [Comparator::Eq, Comparator::Ne, Comparator::Lt] {
            let hits = repo
                .search(
                    Some("dataset"),
                    &[SearchPredicate::new("foo.bar", op, Value::from(1))],
                )
                .unwrap();
            assert!(hits.is_empty(), "op {op:?} matched a missing key");
        }
    }

    #[test]
    fn search_bad_path_is_error() {
        let (_dir, repo) = fresh();
        assert!(matches!(
            repo.search(
                Some("dataset"),
                &[SearchPredicate::new("a..b", Comparator::Eq, Value::from(1))]
            ),
            Err(CmError::BadKeyPath(_))
        ));
    }

    #[test]
    fn search_reflects_updates_after_index_builds() {
        let (_dir, repo) = fresh();
        repo.save("dataset", SaveOptions::with_alias("a"), meta!({"v": 1}), &[])
            .unwrap();
        let p = [SearchPredicate::new("v", Comparator::Eq, Value::from(2))];
        assert!(repo.search(Some("dataset"), &p).unwrap().is_empty());
        // second save must defeat the cache built by the first search
        repo.save("dataset", SaveOptions::with_alias("a"), meta!({"v": 2}), &[])
            .unwrap();
        assert_eq!(repo.search(Some("dataset"), &p).unwrap().len(), 1);
    }

    #[test]
    fn merge_disjoint_repos_is_a_union() {
        let (_d1, a) = fresh();
        let (_d2, b) = fresh();
        for i in 0..2 {
            a.save("m", SaveOptions::with_alias(format!("a{i}")), meta!({"i": i}), &[])
                .unwrap();
        }
        for i in 0..3 {
            b.save("m", SaveOptions::with_alias(format!("b{i}")), meta!({"i": i}), &[])
                .unwrap();
        }
        let report = a.merge_from(&b).unwrap();
        assert_eq!(report.added, 3);
        assert_eq!(report.conflicts, 0);
        assert_eq!(a.list("m").unwrap().len(), 5);
    }

    #[test]
    fn merge_self_is_idempotent() {
        let (_d, a) = fresh();
        for i in 0..3 {
            a.save("m", SaveOptions::with_alias(format!("e{i}")), meta!({"i": i}), &[])
                .unwrap();
        }
        let report = a.merge_from(&a).unwrap();
        assert_eq!(report.added, 0);
        assert_eq!(report.conflicts, 0);
        assert_eq!(report.identical, a.list("m").unwrap().len() + 1); // + descriptor
    }

    #[test]
    fn merge_conflict_newest_wins_and_archives_loser() {
        let (_d1, a) = fresh();
        let (_d2, b) = fresh();
        let uid = Uid::generate();
        a.save(
            "m",
            SaveOptions {
                uid: Some(uid.clone()),
                modified_at: Some(100),
                ..Default::default()
            },
            meta!({"v": "old"}),
            &[],
        )
        .unwrap();
        b.save(
            "m",
            SaveOptions {
                uid: Some(uid.clone()),
                modified_at: Some(200),
                ..Default::default()
            },
            meta!({"v": "new"}),
            &[],
        )
        .unwrap();
        let report = a.merge_from(&b).unwrap();
        assert_eq!(report.conflicts, 1);
        let merged = a.load(&Cid::new("m", uid.as_str()).unwrap()).unwrap();
        assert_eq!(merged.meta.get("v").unwrap(), Some(&Value::from("new")));
        assert_eq!(merged.modified_at, 200);
        let archive = merged.meta.get(KEY_CONFLICTS).unwrap().unwrap();
        let text = canonical_json(archive);
        assert!(text.contains("\"old\""), "loser meta archived: {text}");
    }

    #[test]
    fn merge_is_commutative_on_conflict_free_inputs() {
        let (_d1, a) = fresh();
        let (_d2, b) = fresh();
        let (_d3, a2) = fresh();
        let (_d4, b2) = fresh();
        for (r1, r2, tag) in [(&a, &a2, "x"), (&b, &b2, "y")] {
            for i in 0..3 {
                let uid = Uid::generate();
                for r in [r1, r2] {
                    r.save(
                        "m",
                        SaveOptions {
                            uid: Some(uid.clone()),
                            modified_at: Some(50),
                            ..Default::default()
                        },
                        meta!({"tag": tag, "i": i}),
                        &[],
                    )
                    .unwrap();
                }
            }
        }
        a.merge_from(&b).unwrap();
        b2.merge_from(&a2).unwrap();
        let mut left: Vec<String> = a.list("m").unwrap().iter().map(|c| c.to_string()).collect();
        let mut right: Vec<String> = b2.list("m").unwrap().iter().map(|c| c.to_string()).collect();
        left.sort();
        right.sort();
        assert_eq!(left, right);
    }

    #[test]
    fn aliases_resolve_uniquely_after_merge() {
        let (_d1, a) = fresh();
        let (_d2, b) = fresh();
        a.save(
            "m",
            SaveOptions {
                alias: Some("shared".into()),
                modified_at: Some(100),
                ..Default::default()
            },
            meta!({"side": "a"}),
            &[],
        )
        .unwrap();
        b.save(
            "m",
            SaveOptions {
                alias: Some("shared".into()),
                modified_at: Some(200),
                ..Default::default()
            },
            meta!({"side": "b"}),
            &[],
        )
        .unwrap();
        let report = a.merge_from(&b).unwrap();
        assert_eq!(report.conflicts, 1);
        // exactly one holder of the alias, and it is the newer entry
        let e = a.load(&Cid::new("m", "shared").unwrap()).unwrap();
        assert_eq!(e.meta.get("side").unwrap(), Some(&Value::from("b")));
        let holders: Vec<Entry> = a
            .list("m")
            .unwrap()
            .iter()
            .map(|c| a.load(c).unwrap())
            .filter(|e| e.alias.as_deref() == Some("shared"))
            .collect();
        assert_eq!(holders.len(), 1);
    }

    #[test]
    fn files_round_trip_and_merge() {
        let (_d1, a) = fresh();
        let cid = a
            .save(
                "m",
                SaveOptions::with_alias("blob"),
                meta!({}),
                &[("payload.bin".into(), vec![0, 1, 2, 255])],
            )
            .unwrap();
        let e = a.load(&cid).unwrap();
        assert_eq!(e.files.get("payload.bin").unwrap(), &vec![0, 1, 2, 255]);
    }

    #[test]
    fn uid_format_and_alias_guard() {
        let uid = Uid::generate();
        assert!(is_uid_str(uid.as_str()));
        let (_d, repo) = fresh();
        let hexalias = "0123456789abcdef";
        assert!(matches!(
            repo.save("m", SaveOptions::with_alias(hexalias), meta!({}), &[]),
            Err(CmError::AliasConflict(_))
        ));
    }

    #[test]
    fn concurrent_saves_of_one_alias_keep_single_uid() {
        let (_d, repo) = fresh();
        let repo = std::sync::Arc::new(repo);
        let mut handles = Vec::new();
        for i in 0..8 {
            let r = repo.clone();
            handles.push(std::thread::spawn(move || {
                r.save("m", SaveOptions::with_alias("hot"), meta!({ "i": i }), &[])
                    .unwrap();
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(repo.list("m").unwrap().len(), 1);
    }
}
