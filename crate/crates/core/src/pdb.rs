//! PDB fixed-column parsing: extracts per-chain sequences from SEQRES
//! records. Sequences only — coordinates and everything else are ignored.

/// One chain's residue sequence, as one-letter codes (nonstandard -> X).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PdbChain {
    pub chain_id: char,
    pub sequence: String,
}

/// Parse result; malformed SEQRES lines are skipped with a warning rather
/// than failing the file (real PDB data is noisy).
#[derive(Debug, Clone, Default)]
pub struct PdbParse {
    /// Chains in order of first appearance.
    pub chains: Vec<PdbChain>,
    pub warnings: Vec<String>,
}

impl PdbParse {
    pub fn single_chain(&self) -> Option<&PdbChain> {
        if self.chains.len() == 1 {
            Some(&self.chains[0])
        } else {
            None
        }
    }
}

/// Standard three-letter -> one-letter residue table; anything else
/// (MSE, nucleic-acid codes, ...) collapses to X.
pub fn three_to_one(code: &str) -> char {
    match code {
        "ALA" => 'A',
        "ARG" => 'R',
        "ASN" => 'N',
        "ASP" => 'D',
        "CYS" => 'C',
        "GLN" => 'Q',
        "GLU" => 'E',
        "GLY" => 'G',
        "HIS" => 'H',
        "ILE" => 'I',
        "LEU" => 'L',
        "LYS" => 'K',
        "MET" => 'M',
        "PHE" => 'F',
        "PRO" => 'P',
        "SER" => 'S',
        "THR" => 'T',
        "TRP" => 'W',
        "TYR" => 'Y',
        "VAL" => 'V',
        _ => 'X',
    }
}

/// Parse PDB text. A file with no SEQRES records yields an empty result.
///
/// SEQRES layout (1-based columns): record name 1-6, chain id 12, residues
/// in 13 four-column slots starting at column 20.
pub fn parse_pdb(bytes: &[u8]) -> PdbParse {
    let text = String::from_utf8_lossy(bytes);
    let mut out = PdbParse::default();
    for (lineno, line) in text.lines().enumerate() {
        if !line.starts_with("SEQRES") {
            continue;
        }
        let chars: Vec<char> = line.chars().collect();
        if chars.len() < 13 {
            out.warnings.push(format!(
                "line {}: SEQRES record too short, skipped",
                lineno + 1
            ));
            continue;
        }
        let chain_id = chars[11];
        if chain_id == ' ' {
            out.warnings.push(format!(
                "line {}: SEQRES record has a blank chain id, skipped",
                lineno + 1
            ));
            continue;
        }
        let chain = match out.chains.iter_mut().find(|c| c.chain_id == chain_id) {
            Some(c) => c,
            None => {
                out.chains.push(PdbChain {
                    chain_id,
                    sequence: String::new(),
                });
                out.chains.last_mut().unwrap()
            }
        };
        for slot in 0..13 {
            let start = 19 + 4 * slot;
            if start >= chars.len() {
                break;
            }
            let end = (start + 3).min(chars.len());
            let code: String = chars[start..end].iter().collect::<String>().trim().to_string();
            if code.is_empty() {
                continue;
            }
            chain.sequence.push(three_to_one(&code));
        }
    }
    out
}
