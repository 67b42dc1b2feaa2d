//! Key groups, one-hot keys, decoy generation and the protection techniques
//! applied to a locked circuit.
//!
//! Each key group covers one or two devices. A group lists arrangement
//! tuples (one arrangement per member); exactly one tuple is the design's
//! own. The key holds one bit per tuple, and a valid key sets exactly one
//! bit inside every group's span.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};
use crate::lde::{Arrangement, Polarity};
use crate::metrics::{classify, KeyClass, SpecWindow};
use crate::netlist::{ArrangementSlot, Circuit};
use crate::sweep::SweepRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LockError {
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("device `{0}` assigned to more than one key group")]
    DoubleAssignment(String),
    #[error(
        "group `{group}` asks for {requested} decoys but only {available} distinct tuples remain"
    )]
    TooManyDecoys {
        group: String,
        requested: usize,
        available: usize,
    },
    #[error("inconsistent locking plan: {0}")]
    InconsistentPlan(String),
    #[error("key has {got} bits, plan needs {expected}")]
    KeyLength { expected: usize, got: usize },
    #[error("invalid key in group `{group}`: {defect}")]
    InvalidKey { group: String, defect: KeyDefect },
    #[error("bad key text `{0}`")]
    BadKeyText(String),
    #[error("cannot eliminate nearly-correct keys: {0}")]
    CannotEliminate(String),
    #[error("no candidate devices to lock")]
    NoCandidates,
    #[error("group size target {0} is below 2")]
    BadTarget(usize),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error(transparent)]
    Config(#[from] ConfigErrorText),
}

/// Config errors carry an `io::Error`; this keeps the text so `LockError`
/// stays `Clone + PartialEq`.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct ConfigErrorText(pub String);

impl From<ConfigError> for LockError {
    fn from(e: ConfigError) -> Self {
        LockError::Config(ConfigErrorText(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyDefect {
    NoneHot,
    MultiHot,
}

impl fmt::Display for KeyDefect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyDefect::NoneHot => "no bit set",
            KeyDefect::MultiHot => "more than one bit set",
        })
    }
}

/// Bit vector key. Text form is hex, most significant bit first, with the
/// final nibble zero-padded on the right.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Key {
    bits: Vec<bool>,
}

impl Key {
    pub fn zeros(len: usize) -> Key {
        Key {
            bits: vec![false; len],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Key {
        Key { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bit(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, v: bool) {
        self.bits[i] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn to_hex(&self) -> String {
        self.bits
            .chunks(4)
            .map(|c| {
                let mut v = 0u32;
                for i in 0..4 {
                    v = (v << 1) | u32::from(c.get(i).copied().unwrap_or(false));
                }
                char::from_digit(v, 16).expect("nibble")
            })
            .collect()
    }

    /// Parse hex text into a key of `len` bits; padding bits must be zero.
    pub fn from_hex(text: &str, len: usize) -> Result<Key, LockError> {
        let text = text.trim();
        if text.len() != len.div_ceil(4) {
            return Err(LockError::BadKeyText(text.to_string()));
        }
        let mut bits = Vec::with_capacity(text.len() * 4);
        for ch in text.chars() {
            let v = ch
                .to_digit(16)
                .ok_or_else(|| LockError::BadKeyText(text.to_string()))?;
            for i in (0..4).rev() {
                bits.push((v >> i) & 1 == 1);
            }
        }
        if bits[len..].iter().any(|b| *b) {
            return Err(LockError::BadKeyText(text.to_string()));
        }
        bits.truncate(len);
        Ok(Key { bits })
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Arrangement tuple text, e.g. `SP-BL`.
pub fn format_tuple(t: &[Arrangement]) -> String {
    t.iter()
        .map(|a| a.to_string())
        .collect::<Vec<_>>()
        .join("-")
}

pub fn parse_tuple(s: &str) -> Result<Vec<Arrangement>, LockError> {
    s.split('-')
        .map(|a| {
            a.trim()
                .parse::<Arrangement>()
                .map_err(|e| LockError::InconsistentPlan(e))
        })
        .collect()
}

/// All 3^n arrangement tuples for `n` members, in lexicographic order.
pub fn all_tuples(n: usize) -> Vec<Vec<Arrangement>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|t| {
                Arrangement::ALL.iter().map(move |a| {
                    let mut t = t.clone();
                    t.push(*a);
                    t
                })
            })
            .collect();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyGroup {
    pub id: String,
    /// Card names of the member devices.
    pub members: Vec<String>,
    pub options: Vec<Vec<Arrangement>>,
    correct_index: Option<usize>,
    pub layout_order_seed: u64,
    pub role: Option<String>,
    /// Members share a role and polarity, so mismatched options unbalance them.
    pub symmetric: bool,
}

impl KeyGroup {
    pub fn new(
        id: &str,
        members: Vec<String>,
        options: Vec<Vec<Arrangement>>,
        correct_index: Option<usize>,
    ) -> Result<KeyGroup, LockError> {
        let g = KeyGroup {
            id: id.to_string(),
            members,
            options,
            correct_index,
            layout_order_seed: 0,
            role: None,
            symmetric: false,
        };
        g.check()?;
        Ok(g)
    }

    fn check(&self) -> Result<(), LockError> {
        let bad = |why: String| {
            Err(LockError::InconsistentPlan(format!(
                "group `{}`: {why}",
                self.id
            )))
        };
        if !(1..=2).contains(&self.members.len()) {
            return bad(format!("{} members", self.members.len()));
        }
        if self.options.len() < 2 {
            return bad("fewer than two options".into());
        }
        if self.options.iter().any(|o| o.len() != self.members.len()) {
            return bad("option width differs from member count".into());
        }
        let distinct: BTreeSet<_> = self.options.iter().collect();
        if distinct.len() != self.options.len() {
            return bad("duplicate options".into());
        }
        if self.correct_index.is_some_and(|c| c >= self.options.len()) {
            return bad("correct index out of range".into());
        }
        Ok(())
    }

    pub fn correct_index(&self) -> Option<usize> {
        self.correct_index
    }

    pub fn correct_option(&self) -> Option<&[Arrangement]> {
        self.correct_index.map(|i| self.options[i].as_slice())
    }

    pub fn is_pair(&self) -> bool {
        self.members.len() == 2
    }

    pub fn is_asymmetric(option: &[Arrangement]) -> bool {
        option.windows(2).any(|w| w[0] != w[1])
    }

    /// Remove option `i`, keeping the correct index aligned.
    fn remove_option(&mut self, i: usize) {
        self.options.remove(i);
        if let Some(c) = self.correct_index {
            debug_assert_ne!(c, i, "correct option is never removed");
            if c > i {
                self.correct_index = Some(c - 1);
            }
        }
    }
}

/// Decoy and base counts of a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanCounts {
    pub decoy_pairs: usize,
    pub base_pairs: usize,
    pub base_singles: usize,
    pub decoy_singles: usize,
}

impl PlanCounts {
    /// One key bit per arrangement choice.
    pub fn key_length(&self) -> usize {
        self.decoy_pairs + self.base_pairs + self.base_singles + self.decoy_singles
    }

    /// Arrangements placed in the layout beyond the design's own.
    pub fn arrangements_added(&self) -> usize {
        2 * self.decoy_pairs + self.decoy_singles
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LockingPlan {
    pub counts: PlanCounts,
    pub groups: Vec<KeyGroup>,
}

impl LockingPlan {
    pub fn from_groups(groups: Vec<KeyGroup>) -> LockingPlan {
        let counts = counts_of(&groups);
        LockingPlan { counts, groups }
    }

    /// Recompute counts after the groups changed.
    fn recount(&mut self) {
        self.counts = counts_of(&self.groups);
    }

    pub fn check(&self) -> Result<(), LockError> {
        for g in &self.groups {
            g.check()?;
        }
        let actual = counts_of(&self.groups);
        if actual != self.counts {
            return Err(LockError::InconsistentPlan(format!(
                "declared counts {:?} but groups give {:?}",
                self.counts, actual
            )));
        }
        let mut seen = BTreeSet::new();
        for g in &self.groups {
            for m in &g.members {
                if !seen.insert(m.to_ascii_uppercase()) {
                    return Err(LockError::DoubleAssignment(m.clone()));
                }
            }
        }
        let ids: BTreeSet<_> = self.groups.iter().map(|g| &g.id).collect();
        if ids.len() != self.groups.len() {
            return Err(LockError::InconsistentPlan("duplicate group ids".into()));
        }
        Ok(())
    }

    pub fn group(&self, id: &str) -> Option<&KeyGroup> {
        self.groups.iter().find(|g| g.id == id)
    }

    /// Number of valid (one-hot) keys.
    pub fn valid_keyspace(&self) -> u128 {
        self.groups
            .iter()
            .map(|g| g.options.len() as u128)
            .product()
    }

    /// Start bit of each group's span.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        let mut at = 0;
        self.groups
            .iter()
            .map(|g| {
                let s = (at, g.options.len());
                at += g.options.len();
                s
            })
            .collect()
    }

    pub fn has_secret(&self) -> bool {
        self.groups.iter().all(|g| g.correct_index.is_some())
    }

    /// Copy with every correct index erased.
    pub fn without_secret(&self) -> LockingPlan {
        let mut p = self.clone();
        for g in &mut p.groups {
            g.correct_index = None;
        }
        p
    }

    pub fn correct_selection(&self) -> Option<Vec<usize>> {
        self.groups.iter().map(|g| g.correct_index).collect()
    }

    /// Key text form: one `[lock]` section and a `[group.<id>]` section per
    /// group. Correct indices are never written here.
    pub fn to_config(&self) -> KvConfig {
        let mut c = KvConfig::new();
        let ids: Vec<&str> = self.groups.iter().map(|g| g.id.as_str()).collect();
        c.set("lock.groups", ids.join(", "));
        c.set("lock.decoy_pairs", self.counts.decoy_pairs.to_string());
        c.set("lock.base_pairs", self.counts.base_pairs.to_string());
        c.set("lock.base_singles", self.counts.base_singles.to_string());
        c.set("lock.decoy_singles", self.counts.decoy_singles.to_string());
        c.set("lock.key_length", self.counts.key_length().to_string());
        for g in &self.groups {
            let p = format!("group.{}", g.id);
            c.set(format!("{p}.members"), g.members.join(", "));
            c.set(
                format!("{p}.options"),
                g.options
                    .iter()
                    .map(|o| format_tuple(o))
                    .collect::<Vec<_>>()
                    .join(", "),
            );
            c.set(
                format!("{p}.layout_order_seed"),
                g.layout_order_seed.to_string(),
            );
            c.set(format!("{p}.symmetric"), g.symmetric.to_string());
            if let Some(r) = &g.role {
                c.set(format!("{p}.role"), r.clone());
            }
        }
        c
    }

    pub fn from_config(c: &KvConfig) -> Result<LockingPlan, LockError> {
        let ids = c.get_list("lock.groups");
        if ids.is_empty() {
            return Err(ConfigError::Missing("lock.groups".into()).into());
        }
        let mut groups = Vec::new();
        for id in ids {
            let p = format!("group.{id}");
            let members = c.get_list(&format!("{p}.members"));
            let options = c
                .get_list(&format!("{p}.options"))
                .iter()
                .map(|t| parse_tuple(t))
                .collect::<Result<Vec<_>, _>>()?;
            let mut g = KeyGroup::new(&id, members, options, None)?;
            g.layout_order_seed = c.parse_or(&format!("{p}.layout_order_seed"), 0u64)?;
            g.symmetric = c.get_bool(&format!("{p}.symmetric"), false)?;
            g.role = c.get(&format!("{p}.role")).map(str::to_string);
            groups.push(g);
        }
        let mut plan = LockingPlan::from_groups(groups);
        let declared = PlanCounts {
            decoy_pairs: c.parse_or("lock.decoy_pairs", plan.counts.decoy_pairs)?,
            base_pairs: c.parse_or("lock.base_pairs", plan.counts.base_pairs)?,
            base_singles: c.parse_or("lock.base_singles", plan.counts.base_singles)?,
            decoy_singles: c.parse_or("lock.decoy_singles", plan.counts.decoy_singles)?,
        };
        plan.counts = declared;
        plan.check()?;
        if let Some(kl) = c.parse_opt::<usize>("lock.key_length")? {
            if kl != plan.counts.key_length() {
                return Err(LockError::InconsistentPlan(format!(
                    "declared key_length {kl} disagrees with groups"
                )));
            }
        }
        Ok(plan)
    }

    /// Secret file: correct option index per group plus the full correct key.
    pub fn secret_to_config(&self) -> Option<KvConfig> {
        let sel = self.correct_selection()?;
        let mut c = KvConfig::new();
        for (g, i) in self.groups.iter().zip(&sel) {
            c.set(format!("secret.{}", g.id), i.to_string());
        }
        c.set("secret.key", key_for_selection(self, &sel).to_hex());
        Some(c)
    }

    pub fn apply_secret(&mut self, c: &KvConfig) -> Result<(), LockError> {
        for g in &mut self.groups {
            let i: usize = c.parse_opt(&format!("secret.{}", g.id))?.ok_or_else(|| {
                LockError::InconsistentPlan(format!("secret lacks group `{}`", g.id))
            })?;
            g.correct_index = Some(i);
            g.check()?;
        }
        Ok(())
    }
}

fn counts_of(groups: &[KeyGroup]) -> PlanCounts {
    let mut c = PlanCounts {
        decoy_pairs: 0,
        base_pairs: 0,
        base_singles: 0,
        decoy_singles: 0,
    };
    for g in groups {
        if g.is_pair() {
            c.base_pairs += 1;
            c.decoy_pairs += g.options.len() - 1;
        } else {
            c.base_singles += 1;
            c.decoy_singles += g.options.len() - 1;
        }
    }
    c
}

/// Key length of a consistent plan.
pub fn key_length(plan: &LockingPlan) -> Result<usize, LockError> {
    plan.check()?;
    Ok(plan.counts.key_length())
}

/// Arrangements added by the decoys of a consistent plan.
pub fn arrangements_added(plan: &LockingPlan) -> Result<usize, LockError> {
    plan.check()?;
    Ok(plan.counts.arrangements_added())
}

/// Bits needed to name every arrangement of `n_devices` devices
/// independently with one bit per arrangement.
pub fn raw_keyspace_bits(n_devices: usize) -> usize {
    3 * n_devices
}

/// A locked circuit: member devices sit in key slots named after their group.
#[derive(Debug, Clone, PartialEq)]
pub struct LockedCircuit {
    pub base: Circuit,
    pub plan: LockingPlan,
}

impl LockedCircuit {
    /// Put every group member into its group's key slot. Slots already in
    /// the circuit must name a group containing that device.
    pub fn new(circuit: &Circuit, plan: LockingPlan) -> Result<LockedCircuit, LockError> {
        plan.check()?;
        let mut base = circuit.clone();
        let mut plan = plan;
        let mut owner: BTreeMap<usize, String> = BTreeMap::new();
        for g in &mut plan.groups {
            for m in &mut g.members {
                let idx = base
                    .device_index(m)
                    .ok_or_else(|| LockError::UnknownDevice(m.clone()))?;
                if owner.insert(idx, g.id.clone()).is_some() {
                    return Err(LockError::DoubleAssignment(m.clone()));
                }
                *m = base.mosfets[idx].name.clone();
            }
        }
        for (i, dev) in base.mosfets.iter_mut().enumerate() {
            match (&dev.slot, owner.get(&i)) {
                (ArrangementSlot::Key(slot), Some(g)) if slot != g => {
                    return Err(LockError::InconsistentPlan(format!(
                        "device `{}` sits in slot `{slot}` but belongs to group `{g}`",
                        dev.name
                    )))
                }
                (ArrangementSlot::Key(slot), None) => {
                    return Err(LockError::InconsistentPlan(format!(
                        "slot `{slot}` of device `{}` is not declared in the plan",
                        dev.name
                    )))
                }
                (_, Some(g)) => dev.slot = ArrangementSlot::Key(g.clone()),
                (ArrangementSlot::Literal(_), None) => {}
            }
        }
        Ok(LockedCircuit { base, plan })
    }

    pub fn key_length(&self) -> usize {
        self.plan.counts.key_length()
    }

    pub fn correct_key(&self) -> Option<Key> {
        self.plan
            .correct_selection()
            .map(|s| key_for_selection(&self.plan, &s))
    }

    /// Fraction of the circuit's transistors that sit in key groups.
    pub fn keyed_fraction(&self) -> f64 {
        let keyed: usize = self.plan.groups.iter().map(|g| g.members.len()).sum();
        if self.base.mosfets.is_empty() {
            0.0
        } else {
            keyed as f64 / self.base.mosfets.len() as f64
        }
    }
}

/// Option index chosen in each group, or the first defect found.
pub fn selection_of(plan: &LockingPlan, key: &Key) -> Result<Vec<usize>, LockError> {
    let expected = plan.counts.key_length();
    if key.len() != expected {
        return Err(LockError::KeyLength {
            expected,
            got: key.len(),
        });
    }
    plan.groups
        .iter()
        .zip(plan.spans())
        .map(|(g, (start, len))| {
            let hot: Vec<usize> = (0..len).filter(|j| key.bit(start + j)).collect();
            match hot.as_slice() {
                [i] => Ok(*i),
                [] => Err(LockError::InvalidKey {
                    group: g.id.clone(),
                    defect: KeyDefect::NoneHot,
                }),
                _ => Err(LockError::InvalidKey {
                    group: g.id.clone(),
                    defect: KeyDefect::MultiHot,
                }),
            }
        })
        .collect()
}

pub fn key_for_selection(plan: &LockingPlan, selection: &[usize]) -> Key {
    let mut k = Key::zeros(plan.counts.key_length());
    for ((start, _), &i) in plan.spans().into_iter().zip(selection) {
        k.set(start + i, true);
    }
    k
}

/// Arrangement per member device for an option selection.
pub fn assignment_for(plan: &LockingPlan, selection: &[usize]) -> BTreeMap<String, Arrangement> {
    let mut out = BTreeMap::new();
    for (g, &i) in plan.groups.iter().zip(selection) {
        for (m, a) in g.members.iter().zip(&g.options[i]) {
            out.insert(m.clone(), *a);
        }
    }
    out
}

/// Decode a key into device arrangements after the one-hot check.
pub fn decode_key(
    lc: &LockedCircuit,
    key: &Key,
) -> Result<BTreeMap<String, Arrangement>, LockError> {
    let sel = selection_of(&lc.plan, key)?;
    Ok(assignment_for(&lc.plan, &sel))
}

/// A validated group of devices chosen for locking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub members: Vec<String>,
    pub roles: Vec<Option<String>>,
    pub polarities: Vec<Polarity>,
    /// The design's own arrangements.
    pub base: Vec<Arrangement>,
    pub symmetric: bool,
}

/// Validate a grouping of device names into pairs and singles.
pub fn pair_transistors(
    c: &Circuit,
    grouping: &[Vec<String>],
) -> Result<Vec<GroupSpec>, LockError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for names in grouping {
        if !(1..=2).contains(&names.len()) {
            return Err(LockError::InconsistentPlan(format!(
                "group {names:?} must have 1 or 2 devices"
            )));
        }
        let mut spec = GroupSpec {
            members: Vec::new(),
            roles: Vec::new(),
            polarities: Vec::new(),
            base: Vec::new(),
            symmetric: false,
        };
        for n in names {
            let d = c
                .device(n)
                .ok_or_else(|| LockError::UnknownDevice(n.clone()))?;
            if !seen.insert(d.name.clone()) {
                return Err(LockError::DoubleAssignment(n.clone()));
            }
            spec.members.push(d.name.clone());
            spec.roles.push(d.role.clone());
            spec.polarities.push(d.polarity);
            spec.base.push(match d.slot {
                ArrangementSlot::Literal(a) => a,
                ArrangementSlot::Key(_) => Arrangement::Bl,
            });
        }
        spec.symmetric = names.len() == 2
            && spec.roles[0].is_some()
            && spec.roles[0] == spec.roles[1]
            && spec.polarities[0] == spec.polarities[1];
        out.push(spec);
    }
    if out.is_empty() {
        return Err(LockError::NoCandidates);
    }
    Ok(out)
}

/// Group role-tagged devices automatically: same role and polarity pair up
/// in name order; a leftover device becomes a single.
pub fn auto_grouping(c: &Circuit) -> Vec<Vec<String>> {
    let mut buckets: BTreeMap<(String, Polarity), Vec<String>> = BTreeMap::new();
    for m in &c.mosfets {
        if let Some(r) = &m.role {
            buckets
                .entry((r.clone(), m.polarity))
                .or_default()
                .push(m.name.clone());
        }
    }
    let mut out = Vec::new();
    for (_, mut names) in buckets {
        names.sort_by_key(|n| natural_key(n));
        for chunk in names.chunks(2) {
            out.push(chunk.to_vec());
        }
    }
    out
}

fn natural_key(name: &str) -> (String, u64) {
    let split = name
        .find(|c: char| c.is_ascii_digit())
        .unwrap_or(name.len());
    (
        name[..split].to_string(),
        name[split..].parse().unwrap_or(0),
    )
}

fn group_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Build a plan: each group gets its base tuple plus `decoys[i]` distinct
/// random tuples, with the base tuple at a random position.
pub fn generate_decoys(
    seed: u64,
    specs: &[GroupSpec],
    decoys: &[usize],
) -> Result<LockingPlan, LockError> {
    if specs.is_empty() {
        return Err(LockError::NoCandidates);
    }
    if specs.len() != decoys.len() {
        return Err(LockError::InconsistentPlan(format!(
            "{} groups but {} decoy counts",
            specs.len(),
            decoys.len()
        )));
    }
    let mut groups = Vec::new();
    for (i, (spec, &n)) in specs.iter().zip(decoys).enumerate() {
        let id = format!("g{i}");
        let pool: Vec<Vec<Arrangement>> = all_tuples(spec.members.len())
            .into_iter()
            .filter(|t| *t != spec.base)
            .collect();
        if n == 0 || n > pool.len() {
            return Err(LockError::TooManyDecoys {
                group: id,
                requested: n,
                available: pool.len(),
            });
        }
        let mut rng = group_rng(seed, i as u64);
        let mut options: Vec<Vec<Arrangement>> =
            pool.choose_multiple(&mut rng, n).cloned().collect();
        let at = rng.random_range(0..=n);
        options.insert(at, spec.base.clone());
        let mut g = KeyGroup::new(&id, spec.members.clone(), options, Some(at))?;
        g.symmetric = spec.symmetric;
        g.role = spec.roles[0]
            .clone()
            .filter(|r| spec.roles.iter().all(|x| x.as_ref() == Some(r)));
        groups.push(g);
    }
    Ok(LockingPlan::from_groups(groups))
}

/// Permute the option order inside every group. The permutation for group
/// `i` depends only on `(seed, i)`.
pub fn shuffle_layout_order(seed: u64, lc: &LockedCircuit) -> LockedCircuit {
    let mut out = lc.clone();
    for (i, g) in out.plan.groups.iter_mut().enumerate() {
        let gseed = group_rng(seed, 0x5eed_0000 + i as u64).random::<u64>();
        let mut perm: Vec<usize> = (0..g.options.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(gseed));
        g.options = perm.iter().map(|&j| g.options[j].clone()).collect();
        g.correct_index = g
            .correct_index
            .map(|c| perm.iter().position(|&j| j == c).expect("permutation"));
        g.layout_order_seed = gseed;
    }
    out
}

/// Trim or pad every group to exactly `target` options. Trimming never
/// touches the correct option; padding draws fresh random tuples.
pub fn balance_groups(
    lc: &LockedCircuit,
    target: usize,
    seed: u64,
) -> Result<LockedCircuit, LockError> {
    if target < 2 {
        return Err(LockError::BadTarget(target));
    }
    let mut out = lc.clone();
    for (i, g) in out.plan.groups.iter_mut().enumerate() {
        let total = 3usize.pow(g.members.len() as u32);
        if target > total {
            return Err(LockError::TooManyDecoys {
                group: g.id.clone(),
                requested: target - 1,
                available: total - 1,
            });
        }
        let mut rng = group_rng(seed, 0xba1a_0000 + i as u64);
        while g.options.len() > target {
            let removable: Vec<usize> = (0..g.options.len())
                .filter(|&j| Some(j) != g.correct_index)
                .collect();
            let j = *removable
                .choose(&mut rng)
                .expect("a decoy exists while above target");
            g.remove_option(j);
        }
        if g.options.len() < target {
            let fresh: Vec<Vec<Arrangement>> = all_tuples(g.members.len())
                .into_iter()
                .filter(|t| !g.options.contains(t))
                .collect();
            let add = fresh
                .choose_multiple(&mut rng, target - g.options.len())
                .cloned()
                .collect::<Vec<_>>();
            g.options.extend(add);
        }
    }
    out.plan.recount();
    Ok(out)
}

/// Result of a pruning pass.
#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub locked: LockedCircuit,
    /// `(group id, tuple)` for every option taken out.
    pub removed: Vec<(String, Vec<Arrangement>)>,
    /// `(group id, tuple)` for every option put in.
    pub added: Vec<(String, Vec<Arrangement>)>,
    /// Records of keys that remain valid, with selections and keys in the
    /// pruned plan's coordinates.
    pub records: Vec<SweepRecord>,
    pub keyspace_before: u128,
    pub keyspace_after: u128,
}

/// Drop option `opt` of group `gi` and re-express the surviving records.
fn drop_option(plan: &mut LockingPlan, records: &mut Vec<SweepRecord>, gi: usize, opt: usize) {
    plan.groups[gi].remove_option(opt);
    plan.recount();
    records.retain(|r| r.selection.as_ref().is_none_or(|s| s[gi] != opt));
    for r in records.iter_mut() {
        if let Some(s) = r.selection.as_mut() {
            if s[gi] > opt {
                s[gi] -= 1;
            }
            r.key = key_for_selection(plan, s);
        }
    }
    records.retain(|r| r.selection.is_some());
}

/// Evaluates selections of a candidate lock; used when pruning replaces options.
pub trait KeyEvaluator {
    fn evaluate(
        &mut self,
        lc: &LockedCircuit,
        selections: &[Vec<usize>],
    ) -> Result<Vec<SweepRecord>, LockError>;
}

/// Remove decoy options that produce nearly-correct keys.
///
/// Repeatedly drops the decoy option that appears in the most keys whose
/// class is NearlyCorrect under `spec`. With an evaluator, a dropped option
/// is replaced by an untried tuple whose keys are then evaluated, so group
/// sizes are preserved. Without one, a group already at two options cannot
/// shrink further and the pass fails.
pub fn prune_nearly_correct(
    lc: &LockedCircuit,
    records: &[SweepRecord],
    spec: &SpecWindow,
    mut evaluator: Option<&mut dyn KeyEvaluator>,
) -> Result<PruneOutcome, LockError> {
    if lc.plan.correct_selection().is_none() {
        return Err(LockError::CannotEliminate(
            "plan carries no correct key".into(),
        ));
    }
    let mut plan = lc.plan.clone();
    let keyspace_before = plan.valid_keyspace();
    let mut recs: Vec<SweepRecord> = records
        .iter()
        .filter(|r| r.selection.is_some())
        .cloned()
        .collect();
    let exhaustive = recs.len() as u128 >= keyspace_before;
    let mut removed = Vec::new();
    let mut added = Vec::new();
    let mut tried: Vec<BTreeSet<Vec<Arrangement>>> = plan
        .groups
        .iter()
        .map(|g| g.options.iter().cloned().collect())
        .collect();

    let class_of = |r: &SweepRecord| {
        r.metrics
            .as_ref()
            .map_or(KeyClass::Incorrect, |m| classify(m, spec))
    };
    loop {
        let nearly: Vec<&Vec<usize>> = recs
            .iter()
            .filter(|r| class_of(r) == KeyClass::NearlyCorrect)
            .filter_map(|r| r.selection.as_ref())
            .collect();
        if nearly.is_empty() {
            break;
        }
        let correct_now = plan.correct_selection().expect("secret kept");
        if nearly.iter().any(|s| **s == correct_now) {
            return Err(LockError::CannotEliminate(
                "the correct key itself falls in the nearly-correct band".into(),
            ));
        }
        let mut tally: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for s in &nearly {
            for (gi, &o) in s.iter().enumerate() {
                if o != correct_now[gi] {
                    *tally.entry((gi, o)).or_default() += 1;
                }
            }
        }
        // Most implicated option; ties go to the lowest (group, option).
        let (&(gi, opt), _) = tally
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .expect("a nearly-correct key differs from the correct key somewhere");
        let gid = plan.groups[gi].id.clone();
        let tuple = plan.groups[gi].options[opt].clone();

        if plan.groups[gi].options.len() <= 2 && evaluator.is_none() {
            return Err(LockError::CannotEliminate(format!(
                "group `{gid}` would drop below two options"
            )));
        }
        drop_option(&mut plan, &mut recs, gi, opt);
        removed.push((gid.clone(), tuple));

        if let Some(ev) = evaluator.as_deref_mut() {
            let fresh = all_tuples(plan.groups[gi].members.len())
                .into_iter()
                .find(|t| !tried[gi].contains(t));
            match fresh {
                Some(t) => {
                    tried[gi].insert(t.clone());
                    plan.groups[gi].options.push(t.clone());
                    plan.recount();
                    // Keys already recorded keep their bit positions only if
                    // spans are rebuilt; recompute them.
                    for r in recs.iter_mut() {
                        if let Some(s) = &r.selection {
                            r.key = key_for_selection(&plan, s);
                        }
                    }
                    let new_idx = plan.groups[gi].options.len() - 1;
                    // Exhaustive records get every key of the new option; a
                    // sample gets its own keys moved onto the new option.
                    let sels: Vec<Vec<usize>> = if exhaustive {
                        selections_with(&plan, gi, new_idx)
                    } else {
                        recs.iter()
                            .filter_map(|r| r.selection.clone())
                            .map(|mut s| {
                                s[gi] = new_idx;
                                s
                            })
                            .collect::<BTreeSet<_>>()
                            .into_iter()
                            .collect()
                    };
                    let candidate = LockedCircuit {
                        base: lc.base.clone(),
                        plan: plan.clone(),
                    };
                    let mut fresh_recs = ev.evaluate(&candidate, &sels)?;
                    recs.append(&mut fresh_recs);
                    added.push((gid, t));
                }
                None if plan.groups[gi].options.len() < 2 => {
                    return Err(LockError::CannotEliminate(format!(
                        "group `{gid}` has no untried tuples left"
                    )));
                }
                None => {}
            }
        }
    }
    recs.sort_by(|a, b| a.selection.cmp(&b.selection));
    for (i, r) in recs.iter_mut().enumerate() {
        r.index = i;
    }
    let keyspace_after = plan.valid_keyspace();
    Ok(PruneOutcome {
        locked: LockedCircuit {
            base: lc.base.clone(),
            plan,
        },
        removed,
        added,
        records: recs,
        keyspace_before,
        keyspace_after,
    })
}

/// Every selection with group `gi` fixed at `opt`, in lexicographic order.
pub fn selections_with(plan: &LockingPlan, gi: usize, opt: usize) -> Vec<Vec<usize>> {
    let sizes: Vec<usize> = plan
        .groups
        .iter()
        .enumerate()
        .map(|(i, g)| if i == gi { 1 } else { g.options.len() })
        .collect();
    product(&sizes)
        .into_iter()
        .map(|mut s| {
            s[gi] = opt;
            s
        })
        .collect()
}

/// Lexicographic product of `0..sizes[i]`.
pub fn product(sizes: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = sizes.iter().product();
    let mut out = Vec::with_capacity(total);
    if sizes.is_empty() {
        return out;
    }
    let mut cur = vec![0; sizes.len()];
    for _ in 0..total {
        out.push(cur.clone());
        for d in (0..sizes.len()).rev() {
            cur[d] += 1;
            if cur[d] < sizes[d] {
                break;
            }
            cur[d] = 0;
        }
    }
    out
}

/// Gain below which a key counts as a sign-flipped outlier (dB).
pub const OUTLIER_GAIN_DB: f64 = 0.0;

/// In groups flagged symmetric, remove mismatched options (members differ)
/// that show up in any outlier key: negative gain in dB, or no metrics at
/// all. The correct option always stays; if fewer than two options remain,
/// missing matched tuples are added back.
pub fn prune_asymmetric_outliers(lc: &LockedCircuit, records: &[SweepRecord]) -> PruneOutcome {
    let mut plan = lc.plan.clone();
    let keyspace_before = plan.valid_keyspace();
    let mut recs: Vec<SweepRecord> = records
        .iter()
        .filter(|r| r.selection.is_some())
        .cloned()
        .collect();
    let mut removed = Vec::new();
    let mut added = Vec::new();
    let is_outlier = |r: &SweepRecord| {
        r.metrics
            .as_ref()
            .is_none_or(|m| !(m.gain_db >= OUTLIER_GAIN_DB))
    };
    for gi in 0..plan.groups.len() {
        if !plan.groups[gi].symmetric {
            continue;
        }
        loop {
            let g = &plan.groups[gi];
            let target = (0..g.options.len()).find(|&o| {
                Some(o) != g.correct_index
                    && KeyGroup::is_asymmetric(&g.options[o])
                    && recs
                        .iter()
                        .any(|r| r.selection.as_ref().is_some_and(|s| s[gi] == o) && is_outlier(r))
            });
            let Some(o) = target else { break };
            let tuple = plan.groups[gi].options[o].clone();
            let gid = plan.groups[gi].id.clone();
            if plan.groups[gi].options.len() <= 2 {
                let g = &mut plan.groups[gi];
                let matched = all_tuples(g.members.len())
                    .into_iter()
                    .find(|t| !KeyGroup::is_asymmetric(t) && !g.options.contains(t));
                match matched {
                    Some(t) => {
                        g.options.push(t.clone());
                        added.push((gid.clone(), t));
                    }
                    None => break,
                }
            }
            drop_option(&mut plan, &mut recs, gi, o);
            removed.push((gid, tuple));
        }
    }
    plan.recount();
    for (i, r) in recs.iter_mut().enumerate() {
        if let Some(s) = &r.selection {
            r.key = key_for_selection(&plan, s);
        }
        r.index = i;
    }
    let keyspace_after = plan.valid_keyspace();
    PruneOutcome {
        locked: LockedCircuit {
            base: lc.base.clone(),
            plan,
        },
        removed,
        added,
        records: recs,
        keyspace_before,
        keyspace_after,
    }
}

/// Re-express records of `from` in the option order of `to`. Both plans
/// must hold the same tuples per group.
pub fn remap_records(
    from: &LockingPlan,
    to: &LockingPlan,
    records: &[SweepRecord],
) -> Vec<SweepRecord> {
    let maps: Vec<Vec<usize>> = from
        .groups
        .iter()
        .zip(&to.groups)
        .map(|(a, b)| {
            a.options
                .iter()
                .map(|o| b.options.iter().position(|x| x == o).expect("same tuples"))
                .collect()
        })
        .collect();
    records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if let Some(s) = r.selection.as_mut() {
                for (o, m) in s.iter_mut().zip(&maps) {
                    *o = m[*o];
                }
                r.key = key_for_selection(to, s);
            }
            r
        })
        .collect()
}

/// Settings of the end-to-end locking flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObfuscateConfig {
    /// Device groups; None pairs every role-tagged device automatically.
    pub grouping: Option<Vec<Vec<String>>>,
    /// Decoys per group; a single entry applies to every group.
    pub decoys: Vec<usize>,
    /// Trim or pad every group to this many options.
    pub balance_to: Option<usize>,
    pub prune_symmetry: bool,
    pub prune_nearly_correct: bool,
    pub seed: u64,
    /// Largest keyspace swept exhaustively; larger locks are sampled.
    pub max_exhaustive: u128,
    pub sample: usize,
}

impl Default for ObfuscateConfig {
    fn default() -> Self {
        ObfuscateConfig {
            grouping: None,
            decoys: vec![3],
            balance_to: None,
            prune_symmetry: true,
            prune_nearly_correct: true,
            seed: 0,
            max_exhaustive: 5_000,
            sample: 1_024,
        }
    }
}

impl ObfuscateConfig {
    /// Read `lock.*` keys: `groups` (`P1+P2, N17`, or `auto`), `decoys`,
    /// `balance`, `prune_symmetry`, `prune_nearly_correct`,
    /// `max_exhaustive`, `sample`, and the top-level `seed`.
    pub fn from_config(c: &KvConfig) -> Result<ObfuscateConfig, LockError> {
        let d = ObfuscateConfig::default();
        let grouping = match c.get("lock.groups").map(str::trim) {
            None | Some("auto") => None,
            Some(_) => Some(
                c.get_list("lock.groups")
                    .iter()
                    .map(|g| g.split('+').map(|s| s.trim().to_string()).collect())
                    .collect(),
            ),
        };
        let decoys = match c.get("lock.decoys") {
            Some(_) => c
                .get_list("lock.decoys")
                .iter()
                .map(|v| {
                    v.parse::<usize>().map_err(|e| ConfigError::BadValue {
                        key: "lock.decoys".into(),
                        reason: e.to_string(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?,
            None => d.decoys,
        };
        Ok(ObfuscateConfig {
            grouping,
            decoys,
            balance_to: c.parse_opt("lock.balance")?,
            prune_symmetry: c.get_bool("lock.prune_symmetry", d.prune_symmetry)?,
            prune_nearly_correct: c
                .get_bool("lock.prune_nearly_correct", d.prune_nearly_correct)?,
            seed: c.parse_or("seed", d.seed)?,
            max_exhaustive: c.parse_or("lock.max_exhaustive", d.max_exhaustive)?,
            sample: c.parse_or("lock.sample", d.sample)?,
        })
    }
}

/// Accounting of one locking run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockReport {
    pub groups: usize,
    pub key_length_initial: usize,
    pub arrangements_added_initial: usize,
    pub valid_keyspace_initial: u128,
    pub key_length: usize,
    pub arrangements_added: usize,
    pub valid_keyspace: u128,
    pub raw_keyspace_bits: usize,
    pub keyed_fraction: f64,
    pub swept_keys: usize,
    pub sampled: bool,
    pub correct_rate_initial: f64,
    pub correct_rate: f64,
    pub nearly_correct_initial: usize,
    pub nearly_correct: usize,
    pub negative_gain_initial: usize,
    pub negative_gain: usize,
    /// `group: tuple` of every option taken out.
    pub removed: Vec<String>,
    /// `group: tuple` of every option put in.
    pub added: Vec<String>,
    pub techniques: Vec<String>,
}

impl LockReport {
    /// Accounting of a lock that was built without sweeping it.
    pub fn for_plan(lc: &LockedCircuit, techniques: Vec<String>) -> LockReport {
        let counts = lc.plan.counts;
        LockReport {
            groups: lc.plan.groups.len(),
            key_length_initial: counts.key_length(),
            arrangements_added_initial: counts.arrangements_added(),
            valid_keyspace_initial: lc.plan.valid_keyspace(),
            key_length: counts.key_length(),
            arrangements_added: counts.arrangements_added(),
            valid_keyspace: lc.plan.valid_keyspace(),
            raw_keyspace_bits: raw_keyspace_bits(
                lc.plan.groups.iter().map(|g| g.members.len()).sum(),
            ),
            keyed_fraction: lc.keyed_fraction(),
            swept_keys: 0,
            sampled: false,
            correct_rate_initial: 0.0,
            correct_rate: 0.0,
            nearly_correct_initial: 0,
            nearly_correct: 0,
            negative_gain_initial: 0,
            negative_gain: 0,
            removed: Vec::new(),
            added: Vec::new(),
            techniques,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| s.push_str(&format!("{k:<28}{v}\n"));
        line("groups", self.groups.to_string());
        line("key_length (initial)", self.key_length_initial.to_string());
        line(
            "arrangements_added (initial)",
            self.arrangements_added_initial.to_string(),
        );
        line(
            "valid keyspace (initial)",
            self.valid_keyspace_initial.to_string(),
        );
        line("key_length", self.key_length.to_string());
        line("arrangements_added", self.arrangements_added.to_string());
        line("valid keyspace", self.valid_keyspace.to_string());
        line("raw keyspace bits", self.raw_keyspace_bits.to_string());
        line(
            "keyed device fraction",
            format!("{:.3}", self.keyed_fraction),
        );
        line(
            "swept keys",
            format!(
                "{}{}",
                self.swept_keys,
                if self.sampled { " (sample)" } else { "" }
            ),
        );
        if self.swept_keys > 0 {
            line(
                "correct-key rate",
                format!(
                    "{:.4} -> {:.4}",
                    self.correct_rate_initial, self.correct_rate
                ),
            );
            line(
                "nearly-correct keys",
                format!("{} -> {}", self.nearly_correct_initial, self.nearly_correct),
            );
            line(
                "negative-gain keys",
                format!("{} -> {}", self.negative_gain_initial, self.negative_gain),
            );
        }
        for r in &self.removed {
            line("removed", r.clone());
        }
        for a in &self.added {
            line("added", a.clone());
        }
        for t in &self.techniques {
            line("technique", t.clone());
        }
        s
    }
}

fn sweep_err(e: crate::sweep::SweepError) -> LockError {
    LockError::Evaluation(e.to_string())
}

fn rates(records: &[SweepRecord], spec: &SpecWindow) -> (f64, usize, usize) {
    let class_of = |r: &SweepRecord| {
        r.metrics
            .as_ref()
            .map_or(KeyClass::Incorrect, |m| classify(m, spec))
    };
    let n = records.len().max(1) as f64;
    let correct = records
        .iter()
        .filter(|r| class_of(r) == KeyClass::Correct)
        .count();
    let near = records
        .iter()
        .filter(|r| class_of(r) == KeyClass::NearlyCorrect)
        .count();
    let neg = records
        .iter()
        .filter(|r| {
            r.metrics
                .as_ref()
                .is_none_or(|m| !(m.gain_db >= OUTLIER_GAIN_DB))
        })
        .count();
    (correct as f64 / n, near, neg)
}

/// Pair devices, draw decoys, optionally balance, then [`protect`].
pub fn obfuscate(
    c: &Circuit,
    ocfg: &ObfuscateConfig,
    scfg: &crate::sweep::SweepConfig,
) -> Result<(LockedCircuit, LockReport, Vec<SweepRecord>), LockError> {
    let grouping = ocfg.grouping.clone().unwrap_or_else(|| auto_grouping(c));
    if grouping.is_empty() {
        return Err(LockError::NoCandidates);
    }
    let specs = pair_transistors(c, &grouping)?;
    let decoys: Vec<usize> = match ocfg.decoys.as_slice() {
        [one] => vec![*one; specs.len()],
        many => many.to_vec(),
    };
    let plan = generate_decoys(ocfg.seed, &specs, &decoys)?;
    let mut lc = LockedCircuit::new(c, plan)?;
    let mut techniques = vec!["pairing of same-role devices".to_string()];
    if let Some(t) = ocfg.balance_to {
        lc = balance_groups(&lc, t, ocfg.seed)?;
        techniques.push(format!("balanced every group to {t} options"));
    }
    protect(&lc, ocfg, scfg, techniques)
}

/// Sweep a lock, prune asymmetric outliers and nearly-correct options, and
/// shuffle the layout order.
pub fn protect(
    lc: &LockedCircuit,
    ocfg: &ObfuscateConfig,
    scfg: &crate::sweep::SweepConfig,
    mut techniques: Vec<String>,
) -> Result<(LockedCircuit, LockReport, Vec<SweepRecord>), LockError> {
    use crate::sweep::{enumerate_keys, run_sweep, sample_keys, SweepEvaluator};
    let mut scfg = scfg.clone();
    scfg.checkpoint = None;
    let initial_counts = lc.plan.counts;
    let keyspace0 = lc.plan.valid_keyspace();
    let sampled = keyspace0 > ocfg.max_exhaustive;
    let keys = if sampled {
        sample_keys(lc, ocfg.sample.min(keyspace0 as usize), ocfg.seed, true).map_err(sweep_err)?
    } else {
        enumerate_keys(lc, keyspace0).map_err(sweep_err)?
    };
    let mut records = run_sweep(lc, &keys, &scfg).map_err(sweep_err)?;
    let (rate0, near0, neg0) = rates(&records, &scfg.spec);
    let mut cur = lc.clone();
    let mut removed = Vec::new();
    let mut added = Vec::new();
    if ocfg.prune_symmetry {
        let out = prune_asymmetric_outliers(&cur, &records);
        techniques.push(format!(
            "symmetry pruning removed {} mismatched options",
            out.removed.len()
        ));
        removed.extend(out.removed);
        added.extend(out.added);
        cur = out.locked;
        records = out.records;
    }
    if ocfg.prune_nearly_correct {
        let mut ev = SweepEvaluator { cfg: &scfg };
        let out = prune_nearly_correct(&cur, &records, &scfg.spec, Some(&mut ev))?;
        techniques.push(format!(
            "nearly-correct elimination below {} dB replaced {} options",
            scfg.spec.gain_min_correct,
            out.removed.len()
        ));
        removed.extend(out.removed);
        added.extend(out.added);
        cur = out.locked;
        records = out.records;
    }
    let shuffled = shuffle_layout_order(ocfg.seed, &cur);
    records = remap_records(&cur.plan, &shuffled.plan, &records);
    techniques.push("layout order shuffled".into());
    let (rate, near, neg) = rates(&records, &scfg.spec);
    let fmt = |v: Vec<(String, Vec<Arrangement>)>| {
        v.into_iter()
            .map(|(g, t)| format!("{g}: {}", format_tuple(&t)))
            .collect()
    };
    let report = LockReport {
        groups: shuffled.plan.groups.len(),
        key_length_initial: initial_counts.key_length(),
        arrangements_added_initial: initial_counts.arrangements_added(),
        valid_keyspace_initial: keyspace0,
        key_length: shuffled.plan.counts.key_length(),
        arrangements_added: shuffled.plan.counts.arrangements_added(),
        valid_keyspace: shuffled.plan.valid_keyspace(),
        raw_keyspace_bits: raw_keyspace_bits(
            shuffled.plan.groups.iter().map(|g| g.members.len()).sum(),
        ),
        keyed_fraction: shuffled.keyed_fraction(),
        swept_keys: keys.len(),
        sampled,
        correct_rate_initial: rate0,
        correct_rate: rate,
        nearly_correct_initial: near0,
        nearly_correct: near,
        negative_gain_initial: neg0,
        negative_gain: neg,
        removed: fmt(removed),
        added: fmt(added),
        techniques,
    };
    Ok((shuffled, report, records))
}

/// Plan whose groups list their options explicitly. Each entry is
/// `(members, decoy tuples)`; the design's own tuple becomes option 0, so
/// callers normally follow up with [`shuffle_layout_order`].
pub fn explicit_plan(c: &Circuit, groups: &[(&[&str], &[&str])]) -> Result<LockingPlan, LockError> {
    let grouping: Vec<Vec<String>> = groups
        .iter()
        .map(|(m, _)| m.iter().map(|s| s.to_string()).collect())
        .collect();
    let specs = pair_transistors(c, &grouping)?;
    let mut out = Vec::new();
    for (i, (spec, (_, decoys))) in specs.iter().zip(groups).enumerate() {
        let mut options = vec![spec.base.clone()];
        for d in *decoys {
            options.push(parse_tuple(d)?);
        }
        let mut g = KeyGroup::new(&format!("g{i}"), spec.members.clone(), options, Some(0))?;
        g.symmetric = spec.symmetric;
        g.role = spec.roles[0]
            .clone()
            .filter(|r| spec.roles.iter().all(|x| x.as_ref() == Some(r)));
        out.push(g);
    }
    Ok(LockingPlan::from_groups(out))
}

/// Ready-made locks of the bundled OTA.
pub mod bundled {
    use super::*;

    /// Layout-order seed shared by the bundled locks.
    pub const LAYOUT_SEED: u64 = 0x1de_10c6;
    /// Decoy seed of the generated plans.
    pub const DECOY_SEED: u64 = 2024;

    pub const PAIRS_36: [[&str; 2]; 6] = [
        ["P1", "P2"],
        ["P7", "P8"],
        ["P9", "P10"],
        ["N7", "N8"],
        ["N9", "N10"],
        ["P18", "N18"],
    ];
    pub const DECOYS_36: [usize; 7] = [5, 5, 5, 5, 4, 4, 1];
    pub const PAIRS_41: [[&str; 2]; 8] = [
        ["P1", "P2"],
        ["P7", "P8"],
        ["P9", "P10"],
        ["N7", "N8"],
        ["N9", "N10"],
        ["P18", "N18"],
        ["P16", "P17"],
        ["N13", "N14"],
    ];
    pub const DECOYS_41: [usize; 9] = [4, 4, 4, 4, 4, 4, 4, 3, 1];
    pub const SINGLE: &str = "N17";

    fn generated(
        c: &Circuit,
        pairs: &[[&str; 2]],
        decoys: &[usize],
    ) -> Result<LockedCircuit, LockError> {
        let mut grouping: Vec<Vec<String>> = pairs
            .iter()
            .map(|p| p.iter().map(|s| s.to_string()).collect())
            .collect();
        grouping.push(vec![SINGLE.to_string()]);
        let specs = pair_transistors(c, &grouping)?;
        let plan = generate_decoys(DECOY_SEED, &specs, decoys)?;
        Ok(shuffle_layout_order(
            LAYOUT_SEED,
            &LockedCircuit::new(c, plan)?,
        ))
    }

    /// Six pairs and one single with 28 + 1 decoys: a 36-bit key.
    pub fn lock_36(c: &Circuit) -> Result<LockedCircuit, LockError> {
        generated(c, &PAIRS_36, &DECOYS_36)
    }

    /// Eight pairs and one single with 31 + 1 decoys: a 41-bit key.
    pub fn lock_41(c: &Circuit) -> Result<LockedCircuit, LockError> {
        generated(c, &PAIRS_41, &DECOYS_41)
    }

    /// Desk-scale lock: six pair groups of four options, 4096 valid keys.
    pub fn desk_groups() -> Vec<(&'static [&'static str], &'static [&'static str])> {
        vec![
            (&["N1", "N2"], &["BL-SP", "SOD-BL", "SP-SOD"]),
            (&["P7", "P8"], &["SOD-SOD", "BL-SOD", "SOD-SP"]),
            (&["N7", "N8"], &["BL-BL", "SP-BL", "SOD-SP"]),
            (&["P9", "P10"], &["SP-SP", "BL-SP", "SOD-BL"]),
            (&["P1", "P2"], &["SP-SP", "SOD-BL", "BL-SP"]),
            (&["N13", "N14"], &["BL-BL", "SOD-SOD", "SP-SOD"]),
        ]
    }

    pub fn desk_lock(c: &Circuit) -> Result<LockedCircuit, LockError> {
        let plan = explicit_plan(c, &desk_groups())?;
        Ok(shuffle_layout_order(
            LAYOUT_SEED,
            &LockedCircuit::new(c, plan)?,
        ))
    }

    /// Summing-pair lock for symmetry pruning: N7/N8 with all nine tuples
    /// and P9/P10 with matched tuples only.
    pub fn symmetry_lock(c: &Circuit) -> Result<LockedCircuit, LockError> {
        let plan = explicit_plan(
            c,
            &[
                (
                    &["N7", "N8"],
                    &[
                        "BL-BL", "BL-SP", "BL-SOD", "SP-BL", "SP-SOD", "SOD-BL", "SOD-SP",
                        "SOD-SOD",
                    ],
                ),
                (&["P9", "P10"], &["BL-BL", "SP-SP"]),
            ],
        )?;
        Ok(shuffle_layout_order(
            LAYOUT_SEED,
            &LockedCircuit::new(c, plan)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netlist::builtin_ota;

    fn plan_with(decoys: &[usize], single_decoys: usize) -> LockingPlan {
        let pairs = [
            ["P1", "P2"],
            ["P7", "P8"],
            ["P9", "P10"],
            ["N7", "N8"],
            ["N9", "N10"],
            ["P18", "N18"],
            ["P16", "P17"],
            ["N13", "N14"],
        ];
        let c = builtin_ota();
        let mut grouping: Vec<Vec<String>> = pairs[..decoys.len()]
            .iter()
            .map(|p| p.iter().map(|s| s.to_string()).collect())
            .collect();
        grouping.push(vec!["N17".into()]);
        let specs = pair_transistors(&c, &grouping).unwrap();
        let mut counts = decoys.to_vec();
        counts.push(single_decoys);
        generate_decoys(11, &specs, &counts).unwrap()
    }

    #[test]
    fn bookkeeping_of_both_experiments() {
        let p = plan_with(&[5, 5, 5, 5, 4, 4], 1);
        assert_eq!(key_length(&p).unwrap(), 36);
        assert_eq!(arrangements_added(&p).unwrap(), 57);
        let p = plan_with(&[4, 4, 4, 4, 4, 4, 4, 3], 1);
        assert_eq!(key_length(&p).unwrap(), 41);
        assert_eq!(arrangements_added(&p).unwrap(), 63);
        let c = PlanCounts {
            decoy_pairs: 0,
            base_pairs: 1,
            base_singles: 0,
            decoy_singles: 0,
        };
        assert_eq!((c.key_length(), c.arrangements_added()), (1, 0));
        assert_eq!(raw_keyspace_bits(36), 108);
        assert_eq!(raw_keyspace_bits(13), 39);
        assert_eq!(raw_keyspace_bits(1), 3);
    }

    #[test]
    fn inconsistent_counts_are_rejected() {
        let mut p = plan_with(&[3], 1);
        p.counts.decoy_pairs += 1;
        assert!(matches!(
            key_length(&p),
            Err(LockError::InconsistentPlan(_))
        ));
    }

    #[test]
    fn pairing_flags_same_role_pairs() {
        let c = builtin_ota();
        let s =
            pair_transistors(&c, &[vec!["P1".into(), "P2".into()], vec!["N18".into()]]).unwrap();
        assert!(s[0].symmetric);
        assert!(!s[1].symmetric);
        assert_eq!(s[1].members, vec!["MN18"]);
        let e =
            pair_transistors(&c, &[vec!["P1".into(), "P2".into()], vec!["P2".into()]]).unwrap_err();
        assert_eq!(e, LockError::DoubleAssignment("P2".into()));
        assert_eq!(
            pair_transistors(&c, &[vec!["Q9".into()]]).unwrap_err(),
            LockError::UnknownDevice("Q9".into())
        );
        assert_eq!(
            pair_transistors(&c, &[]).unwrap_err(),
            LockError::NoCandidates
        );
        // complementary output devices share a role but not a polarity
        let s = pair_transistors(&c, &[vec!["P18".into(), "N18".into()]]).unwrap();
        assert!(!s[0].symmetric);
    }

    #[test]
    fn decoy_limits() {
        let c = builtin_ota();
        let s =
            pair_transistors(&c, &[vec!["P1".into(), "P2".into()], vec!["N17".into()]]).unwrap();
        let p = generate_decoys(3, &s, &[7, 2]).unwrap();
        assert_eq!(p.groups[0].options.len(), 8);
        assert_eq!(p.groups[1].options.len(), 3);
        assert!(matches!(
            generate_decoys(3, &s, &[7, 10]),
            Err(LockError::TooManyDecoys { .. })
        ));
        assert!(matches!(
            generate_decoys(3, &s, &[9, 1]),
            Err(LockError::TooManyDecoys { .. })
        ));
        assert_eq!(
            generate_decoys(3, &s, &[4, 1]).unwrap(),
            generate_decoys(3, &s, &[4, 1]).unwrap()
        );
    }

    #[test]
    fn one_hot_decoding() {
        let mut g = KeyGroup::new(
            "g0",
            vec!["MP1".into(), "MP2".into()],
            all_tuples(2)[..4].to_vec(),
            Some(0),
        )
        .unwrap();
        g.symmetric = true;
        let plan = LockingPlan::from_groups(vec![g]);
        let sel = selection_of(&plan, &Key::from_bits(vec![false, true, false, false])).unwrap();
        assert_eq!(sel, vec![1]);
        let e = selection_of(&plan, &Key::from_bits(vec![false, true, true, false])).unwrap_err();
        assert!(matches!(
            e,
            LockError::InvalidKey {
                defect: KeyDefect::MultiHot,
                ..
            }
        ));
        let e = selection_of(&plan, &Key::zeros(4)).unwrap_err();
        assert!(matches!(
            e,
            LockError::InvalidKey {
                defect: KeyDefect::NoneHot,
                ..
            }
        ));
        assert!(matches!(
            selection_of(&plan, &Key::zeros(3)),
            Err(LockError::KeyLength { .. })
        ));
    }

    #[test]
    fn correct_key_restores_base_design() {
        let c = builtin_ota();
        let p = plan_with(&[3, 3], 2);
        let lc = LockedCircuit::new(&c, p).unwrap();
        let asg = decode_key(&lc, &lc.correct_key().unwrap()).unwrap();
        for (dev, a) in &asg {
            assert_eq!(c.device(dev).unwrap().slot, ArrangementSlot::Literal(*a));
        }
        let sh = shuffle_layout_order(99, &lc);
        assert_eq!(decode_key(&sh, &sh.correct_key().unwrap()).unwrap(), asg);
        assert_eq!(shuffle_layout_order(99, &lc), sh);
        let b = balance_groups(&sh, 3, 1).unwrap();
        assert!(b.plan.groups.iter().all(|g| g.options.len() == 3));
        assert_eq!(decode_key(&b, &b.correct_key().unwrap()).unwrap(), asg);
        assert_eq!(b.plan.valid_keyspace(), 27);
    }

    #[test]
    fn balance_trims_and_pads() {
        let c = builtin_ota();
        let grouping =
            [["P1", "P2"], ["N7", "N8"], ["N9", "N10"]].map(|g| g.map(String::from).to_vec());
        let specs = pair_transistors(&c, &grouping).unwrap();
        let p = generate_decoys(5, &specs, &[7, 4, 2]).unwrap();
        let lc = LockedCircuit::new(&c, p).unwrap();
        let b = balance_groups(&lc, 4, 2).unwrap();
        assert!(b.plan.groups.iter().all(|g| g.options.len() == 4));
        assert_eq!(b.plan.valid_keyspace(), 64);
        assert_eq!(
            b.plan
                .correct_selection()
                .map(|s| assignment_for(&b.plan, &s)),
            lc.plan
                .correct_selection()
                .map(|s| assignment_for(&lc.plan, &s))
        );
        assert!(matches!(
            balance_groups(&lc, 10, 2),
            Err(LockError::TooManyDecoys { .. })
        ));
        assert_eq!(
            balance_groups(&lc, 1, 2).unwrap_err(),
            LockError::BadTarget(1)
        );
        let with_single = LockedCircuit::new(&c, plan_with(&[3], 2)).unwrap();
        assert!(matches!(
            balance_groups(&with_single, 4, 2),
            Err(LockError::TooManyDecoys { .. })
        ));
    }

    #[test]
    fn hex_roundtrip() {
        let k = Key::from_bits(vec![true, false, true, true, false, true]);
        assert_eq!(k.to_hex(), "b4");
        assert_eq!(Key::from_hex("b4", 6).unwrap(), k);
        assert!(Key::from_hex("b6", 6).is_err());
        assert!(Key::from_hex("b", 6).is_err());
    }

    #[test]
    fn plan_file_roundtrip_hides_secret() {
        let p = plan_with(&[3, 2], 1);
        let text = p.to_config().to_canonical();
        assert!(!text.contains("correct"));
        let back = LockingPlan::from_config(&KvConfig::parse(&text).unwrap()).unwrap();
        assert_eq!(back, p.without_secret());
        let mut restored = back;
        restored
            .apply_secret(&p.secret_to_config().unwrap())
            .unwrap();
        assert_eq!(restored, p);
    }

    #[test]
    fn undeclared_slot_is_caught() {
        let c = builtin_ota()
            .with_slot("P1", ArrangementSlot::Key("zz".into()))
            .unwrap();
        let p = plan_with(&[3], 1);
        assert!(matches!(
            LockedCircuit::new(&c, p),
            Err(LockError::InconsistentPlan(_))
        ));
    }

    #[test]
    fn lexicographic_product() {
        assert_eq!(
            product(&[2, 2]),
            vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]
        );
        assert_eq!(product(&[4, 4, 2]).len(), 32);
        assert_eq!(product(&[3]).len(), 3);
    }
}
