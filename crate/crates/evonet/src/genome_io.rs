//! Genome documents: the genome plus the name of the grammar that decodes
//! it, as pretty-printed JSON with a fixed key order.

use std::fs;
use std::path::Path;

use evonet_core::genome::{Genome, SeedOptions};
use evonet_core::grammar::{parse_grammar, Grammar};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, IoContext, Result};

pub const GENOME_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrammarName {
    /// Full search space for 32x32 inputs.
    #[default]
    Neronet,
    /// Reduced search space for 8x8 synthetic inputs.
    Desk,
}

impl GrammarName {
    pub fn text(self) -> &'static str {
        match self {
            GrammarName::Neronet => evonet_core::NERONET_GRAMMAR,
            GrammarName::Desk => evonet_core::DESK_GRAMMAR,
        }
    }

    pub fn grammar(self) -> Result<Grammar> {
        Ok(parse_grammar(self.text())?)
    }

    pub fn seed_options(self) -> SeedOptions {
        match self {
            GrammarName::Neronet => SeedOptions::cifar(),
            GrammarName::Desk => SeedOptions::desk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenomeDocument {
    pub format: u32,
    pub grammar: GrammarName,
    pub genome: Genome,
}

impl GenomeDocument {
    pub fn new(grammar: GrammarName, genome: Genome) -> Self {
        GenomeDocument { format: GENOME_FORMAT, grammar, genome }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GenomeDocument = serde_json::from_str(text)?;
        if doc.format != GENOME_FORMAT {
            return Err(format_err(format!("unsupported genome format {}", doc.format)));
        }
        Ok(doc)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).at(path)?)
    }
}

/// Writes through a sibling temporary file so readers never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use evonet_core::genome::{neronet_modules, random_genome, BudgetRange};
    use rand::SeedableRng;

    #[test]
    fn documents_round_trip_losslessly() {
        let grammar = GrammarName::Desk.grammar().unwrap();
        let mut rng = evonet_core::Rng::seed_from_u64(4);
        for _ in 0..20 {
            let g = random_genome(&neronet_modules(), &grammar, BudgetRange { default: 300, max: 900 }, &mut rng).unwrap();
            let doc = GenomeDocument::new(GrammarName::Desk, g);
            let text = doc.to_json().unwrap();
            let back = GenomeDocument::from_json(&text).unwrap();
            assert_eq!(back, doc);
            assert_eq!(back.to_json().unwrap(), text);
        }
    }

    #[test]
    fn unknown_fields_and_versions_are_rejected() {
        let grammar = GrammarName::Desk.grammar().unwrap();
        let mut rng = evonet_core::Rng::seed_from_u64(5);
        let g = random_genome(&neronet_modules(), &grammar, BudgetRange { default: 300, max: 900 }, &mut rng).unwrap();
        let mut v = serde_json::to_value(GenomeDocument::new(GrammarName::Desk, g)).unwrap();
        v["format"] = 9.into();
        assert!(GenomeDocument::from_json(&v.to_string()).is_err());
        v["format"] = 1.into();
        v["extra"] = true.into();
        assert!(GenomeDocument::from_json(&v.to_string()).is_err());
    }
}
