//! Canonical 12-lead registry and the alias table used to place
//! non-standard (ambulatory) lead names into canonical slots.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_LEADS: usize = 12;

pub const CANONICAL_LEAD_NAMES: [&str; NUM_LEADS] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

/// A canonical lead slot, `0..12` in the order I, II, III, aVR, aVL, aVF, V1–V6.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Lead(u8);

impl Lead {
    pub const I: Lead = Lead(0);
    pub const II: Lead = Lead(1);

    pub fn from_slot(slot: usize) -> Option<Lead> {
        (slot < NUM_LEADS).then(|| Lead(slot as u8))
    }

    pub fn slot(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        CANONICAL_LEAD_NAMES[self.slot()]
    }

    /// Exact canonical name lookup (case-insensitive).
    pub fn from_name(name: &str) -> Option<Lead> {
        CANONICAL_LEAD_NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name.trim()))
            .map(|slot| Lead(slot as u8))
    }

    pub fn all() -> impl Iterator<Item = Lead> {
        (0..NUM_LEADS as u8).map(Lead)
    }
}

impl fmt::Display for Lead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for Lead {
    type Error = String;

    fn try_from(value: String) -> std::result::Result<Self, Self::Error> {
        Lead::from_name(&value).ok_or_else(|| format!("not a canonical lead: {value}"))
    }
}

impl From<Lead> for String {
    fn from(lead: Lead) -> String {
        lead.name().to_string()
    }
}

/// Maps raw lead names found in source files onto canonical slots.
///
/// Resolution order for a name: canonical name, then the explicit alias map,
/// then the auxiliary list. Auxiliary names have no fixed slot; they take the
/// first free slot among I and II in file order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadRegistry {
    pub aliases: BTreeMap<String, Lead>,
    pub auxiliary: BTreeSet<String>,
}

impl Default for LeadRegistry {
    fn default() -> Self {
        let aliases = [
            ("MLI", Lead::I),
            ("MLII", Lead::II),
            ("MLIII", Lead(2)),
            ("D3", Lead(2)),
            ("MV1", Lead(6)),
            ("MV2", Lead(7)),
            ("MV4", Lead(9)),
            ("MV5", Lead(10)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_ascii_uppercase(), v))
        .collect();
        let auxiliary = ["ECG", "ECG1", "ECG2", "CM5", "CC5", "ML5", "MV3", "MV6"]
            .into_iter()
            .map(str::to_string)
            .collect();
        Self { aliases, auxiliary }
    }
}

impl LeadRegistry {
    pub fn with_alias(mut self, name: &str, lead: Lead) -> Self {
        self.aliases.insert(name.trim().to_ascii_uppercase(), lead);
        self
    }

    pub fn with_auxiliary(mut self, name: &str) -> Self {
        self.auxiliary.insert(name.trim().to_ascii_uppercase());
        self
    }

    pub fn is_known(&self, name: &str) -> bool {
        let key = name.trim().to_ascii_uppercase();
        Lead::from_name(name).is_some()
            || self.aliases.contains_key(&key)
            || self.auxiliary.contains(&key)
    }

    /// Assigns every raw name a distinct canonical slot.
    pub fn resolve(&self, names: &[String]) -> Result<Vec<Lead>> {
        let mut slots: Vec<Option<Lead>> = Vec::with_capacity(names.len());
        let mut taken = BTreeSet::new();
        for name in names {
            let key = name.trim().to_ascii_uppercase();
            let fixed = Lead::from_name(name).or_else(|| self.aliases.get(&key).copied());
            match fixed {
                Some(lead) => {
                    if !taken.insert(lead) {
                        return Err(Error::InvalidRecord(format!(
                            "leads map to the same slot {lead} (`{name}`)"
                        )));
                    }
                    slots.push(Some(lead));
                }
                None if self.auxiliary.contains(&key) => slots.push(None),
                None => return Err(Error::UnknownLead(name.clone())),
            }
        }
        let mut out = Vec::with_capacity(names.len());
        for (name, slot) in names.iter().zip(slots) {
            let lead = match slot {
                Some(lead) => lead,
                None => {
                    let free = [Lead::I, Lead::II].into_iter().find(|l| !taken.contains(l));
                    let lead = free.ok_or_else(|| {
                        Error::InvalidRecord(format!(
                            "no free default slot (I/II) for auxiliary lead `{name}`"
                        ))
                    })?;
                    taken.insert(lead);
                    lead
                }
            };
            out.push(lead);
        }
        Ok(out)
    }
}
