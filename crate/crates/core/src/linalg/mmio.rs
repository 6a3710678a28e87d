use std::io::BufRead;

use thiserror::Error;

use super::CsrMatrix;

#[derive(Debug, Error)]
pub enum MatrixMarketError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported header: {0}")]
    Unsupported(String),
}

/// Reads a Matrix Market `coordinate real|integer general|symmetric` file.
/// Duplicate entries are summed.
pub fn read_matrix_market(reader: impl BufRead) -> Result<CsrMatrix, MatrixMarketError> {
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| MatrixMarketError::Unsupported("empty input".into()))?;
    let header = header?;
    let words: Vec<String> = header
        .split_whitespace()
        .map(str::to_ascii_lowercase)
        .collect();
    if words.len() != 5
        || words[0] != "%%matrixmarket"
        || words[1] != "matrix"
        || words[2] != "coordinate"
    {
        return Err(MatrixMarketError::Unsupported(header));
    }
    if words[3] != "real" && words[3] != "integer" {
        return Err(MatrixMarketError::Unsupported(header));
    }
    let symmetric = match words[4].as_str() {
        "general" => false,
        "symmetric" => true,
        _ => return Err(MatrixMarketError::Unsupported(header)),
    };

    let parse_err = |line: usize, msg: &str| MatrixMarketError::Parse {
        line: line + 1,
        msg: msg.to_string(),
    };
    let mut size: Option<(usize, usize, usize)> = None;
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    for (no, line) in lines {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        match size {
            None => {
                if f.len() != 3 {
                    return Err(parse_err(no, "expected `rows cols nnz`"));
                }
                let p = |s: &str| s.parse::<usize>().map_err(|_| parse_err(no, "bad size"));
                let s = (p(f[0])?, p(f[1])?, p(f[2])?);
                triplets.reserve(if symmetric { 2 * s.2 } else { s.2 });
                size = Some(s);
            }
            Some((rows, cols, _)) => {
                if f.len() != 3 {
                    return Err(parse_err(no, "expected `row col value`"));
                }
                let i: usize = f[0].parse().map_err(|_| parse_err(no, "bad row"))?;
                let j: usize = f[1].parse().map_err(|_| parse_err(no, "bad column"))?;
                let v: f64 = f[2].parse().map_err(|_| parse_err(no, "bad value"))?;
                if i == 0 || j == 0 || i > rows || j > cols {
                    return Err(parse_err(no, "index out of range"));
                }
                triplets.push((i - 1, j - 1, v));
                if symmetric && i != j {
                    triplets.push((j - 1, i - 1, v));
                }
            }
        }
    }
    let (rows, cols, nnz) =
        size.ok_or_else(|| MatrixMarketError::Unsupported("missing size line".into()))?;
    let stored = if symmetric {
        triplets.iter().filter(|(i, j, _)| i >= j).count()
    } else {
        triplets.len()
    };
    if stored != nnz {
        return Err(MatrixMarketError::Unsupported(format!(
            "declared {nnz} entries, found {stored}"
        )));
    }
    triplets.sort_by_key(|&(i, j, _)| (i, j));
    let mut row_offsets = vec![0usize; rows + 1];
    let mut col_indices = Vec::with_capacity(triplets.len());
    let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
    let mut last: Option<(usize, usize)> = None;
    for (i, j, v) in triplets {
        if last == Some((i, j)) {
            *values.last_mut().expect("duplicate follows an entry") += v;
            continue;
        }
        col_indices.push(j);
        values.push(v);
        row_offsets[i + 1] += 1;
        last = Some((i, j));
    }
    for r in 0..rows {
        row_offsets[r + 1] += row_offsets[r];
    }
    CsrMatrix::new(rows, cols, row_offsets, col_indices, values)
        .map_err(|e| MatrixMarketError::Unsupported(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_general_with_duplicates() {
        let text = "%%MatrixMarket matrix coordinate real general\n% comment\n2 3 4\n1 1 2.0\n2 3 -1\n1 1 0.5\n1 2 4e0\n";
        let a = read_matrix_market(text.as_bytes()).unwrap();
        assert_eq!(
            a.to_dense(),
            vec![vec![2.5, 4.0, 0.0], vec![0.0, 0.0, -1.0]]
        );
    }

    #[test]
    fn expands_symmetric() {
        let text = "%%MatrixMarket matrix coordinate real symmetric\n2 2 2\n1 1 2\n2 1 -1\n";
        let a = read_matrix_market(text.as_bytes()).unwrap();
        assert_eq!(a.to_dense(), vec![vec![2.0, -1.0], vec![-1.0, 0.0]]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(
            read_matrix_market("%%MatrixMarket matrix array real general\n".as_bytes()).is_err()
        );
        let oob = "%%MatrixMarket matrix coordinate real general\n1 1 1\n2 1 1.0\n";
        assert!(matches!(
            read_matrix_market(oob.as_bytes()),
            Err(MatrixMarketError::Parse { line: 3, .. })
        ));
    }
}
