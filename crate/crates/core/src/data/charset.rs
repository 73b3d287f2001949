use std::collections::HashMap;
use std::path::Path;

use super::DataError;
use crate::ctc::LabelSequence;

const HEADER: &str = "#gfcn-charset v1";

/// Ordered symbol inventory. The CTC blank is not a member; models place it
/// at index `len()`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Charset {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Charset {
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Result<Self, DataError> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if c == '\n' || c == '\t' || c == '\r' {
                return Err(DataError::Charset(format!("control character {c:?} cannot be a symbol")));
            }
            if index.insert(c, i).is_some() {
                return Err(DataError::Charset(format!("duplicate symbol {c:?}")));
            }
        }
        if symbols.is_empty() {
            return Err(DataError::Charset("no symbols".into()));
        }
        Ok(Self { symbols, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<LabelSequence, DataError> {
        text.chars()
            .enumerate()
            .map(|(position, symbol)| self.index_of(symbol).ok_or(DataError::UnknownSymbol { symbol, position }))
            .collect::<Result<Vec<_>, _>>()
            .map(LabelSequence::new)
    }

    pub fn decode(&self, indices: &[usize]) -> Result<String, DataError> {
        indices
            .iter()
            .map(|&i| self.symbols.get(i).copied().ok_or(DataError::UnknownIndex { index: i, size: self.len() }))
            .collect()
    }

    /// Stable identifier of the symbol order.
    pub fn digest(&self) -> String {
        crate::digest_hex(&self.symbols.iter().collect::<String>())
    }

    /// Header line, then one symbol per line in index order.
    pub fn to_file_string(&self) -> String {
        let mut s = String::from(HEADER);
        s.push('\n');
        for c in &self.symbols {
            s.push(*c);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut lines = text.split('\n');
        match lines.next() {
            Some(h) if h.trim_end_matches('\r') == HEADER => {}
            other => return Err(DataError::Charset(format!("expected header {HEADER:?}, found {:?}", other.unwrap_or("")))),
        }
        let mut symbols = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            let mut chars = line.chars();
            match (chars.next(), chars.next()) {
                (None, _) => continue,
                (Some(c), None) => symbols.push(c),
                _ => return Err(DataError::Charset(format!("line {} holds more than one symbol: {line:?}", n + 2))),
            }
        }
        Self::new(symbols)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            DataError::Charset(m) => DataError::Charset(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_file_string()).map_err(|e| DataError::io(path, e))
    }
}
