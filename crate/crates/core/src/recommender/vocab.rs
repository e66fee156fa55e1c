use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{IdentifierTable, ItemIdentifier};

/// Token id layout: `[PAD, BOS, level 0 codes, ..., level L-1 codes, dedup block]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyLayout {
    pub levels: usize,
    pub codebook_size: usize,
    pub dedup_reserve: usize,
}

impl VocabularyLayout {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const SPECIALS: usize = 2;

    pub fn new(levels: usize, codebook_size: usize, dedup_reserve: usize) -> Result<Self> {
        if levels == 0 || codebook_size == 0 || dedup_reserve == 0 {
            return Err(Error::Argument(format!(
                "vocabulary needs positive sizes (levels {levels}, K {codebook_size}, dedup {dedup_reserve})"
            )));
        }
        Ok(Self {
            levels,
            codebook_size,
            dedup_reserve,
        })
    }

    /// Reserves `safety_factor` times the dedup tokens `table` currently uses.
    pub fn for_identifiers(table: &IdentifierTable, safety_factor: usize) -> Result<Self> {
        let used = table.dedup_tokens_used().max(1);
        Self::new(table.levels(), table.codebook_size(), used * safety_factor.max(1))
    }

    pub fn level_offset(&self, level: usize) -> usize {
        Self::SPECIALS + level * self.codebook_size
    }

    pub fn dedup_offset(&self) -> usize {
        Self::SPECIALS + self.levels * self.codebook_size
    }

    pub fn size(&self) -> usize {
        self.dedup_offset() + self.dedup_reserve
    }

    pub fn tokens_per_item(&self) -> usize {
        self.levels + 1
    }

    pub fn code_token(&self, level: usize, code: u32) -> u32 {
        (self.level_offset(level) + code as usize) as u32
    }

    pub fn dedup_token(&self, dedup: u32) -> Result<u32> {
        if dedup as usize >= self.dedup_reserve {
            return Err(Error::Capacity(format!(
                "dedup token {dedup} exceeds the reserved block of {}",
                self.dedup_reserve
            )));
        }
        Ok((self.dedup_offset() + dedup as usize) as u32)
    }

    /// `[c_1, ..., c_L, dedup]` as vocabulary ids.
    pub fn item_tokens(&self, id: &ItemIdentifier) -> Result<Vec<u32>> {
        if id.codes.len() != self.levels {
            return Err(Error::Shape(format!(
                "identifier has {} codes, layout expects {}",
                id.codes.len(),
                self.levels
            )));
        }
        let mut out: Vec<u32> = id
            .codes
            .iter()
            .enumerate()
            .map(|(l, &c)| self.code_token(l, c))
            .collect();
        out.push(self.dedup_token(id.dedup)?);
        Ok(out)
    }

    pub fn check_capacity(&self, table: &IdentifierTable) -> Result<()> {
        if table.codebook_size() != self.codebook_size || table.levels() != self.levels {
            return Err(Error::Shape("identifier table does not match the vocabulary layout".into()));
        }
        let used = table.dedup_tokens_used();
        if used > self.dedup_reserve {
            return Err(Error::Capacity(format!(
                "{used} dedup tokens needed, {} reserved",
                self.dedup_reserve
            )));
        }
        Ok(())
    }
}
