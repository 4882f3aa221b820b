//! JSON rendering of address spaces for golden files and CLI output.

use serde::ser::{SerializeMap, SerializeStruct};
use serde::{Serialize, Serializer};

use super::{AddressSpace, Mapping, PageContent};
use crate::arch::page_addr;

pub const SCHEMA_VERSION: u32 = 1;

impl Serialize for PageContent {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let (tag, value) = match *self {
            PageContent::Zero => ("zero", None),
            PageContent::Guard => ("guard", None),
            PageContent::CodePointer(v) => ("code_pointer", Some(v)),
            PageContent::Data(v) => ("data", Some(v)),
            PageContent::ReturnAddress(v) => ("return_address", Some(v)),
        };
        let mut m = s.serialize_map(Some(if value.is_some() { 2 } else { 1 }))?;
        m.serialize_entry("tag", tag)?;
        if let Some(v) = value {
            m.serialize_entry("value", &format!("{v:#x}"))?;
        }
        m.end()
    }
}

impl Serialize for Mapping {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("Mapping", 5)?;
        st.serialize_field("start", &format!("{:#x}", self.base_addr()))?;
        st.serialize_field("end", &format!("{:#x}", self.end_addr()))?;
        st.serialize_field("pages", &self.pages())?;
        st.serialize_field("perm", self.perm.as_str())?;
        st.serialize_field("content", &self.content)?;
        st.end()
    }
}

struct Word(u64, PageContent);

impl Serialize for Word {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("Word", 2)?;
        st.serialize_field("addr", &format!("{:#x}", self.0))?;
        st.serialize_field("content", &self.1)?;
        st.end()
    }
}

impl Serialize for AddressSpace {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let ranges: Vec<Mapping> = self.mappings().collect();
        let words: Vec<Word> = self.words.iter().map(|(&a, &c)| Word(a, c)).collect();
        let mut st = s.serialize_struct("AddressSpace", 6)?;
        st.serialize_field("schema", &SCHEMA_VERSION)?;
        st.serialize_field("arch", &self.arch())?;
        st.serialize_field("layout", &self.layout)?;
        st.serialize_field("brk", &format!("{:#x}", page_addr(self.brk)))?;
        st.serialize_field("ranges", &ranges)?;
        st.serialize_field("words", &words)?;
        st.end()
    }
}

impl AddressSpace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("address space serializes")
    }
}
