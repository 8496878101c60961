//! Reads the tables in docs/PROTOCOL.md so tests compare the implementation
//! against the published contract rather than against a private copy.

use std::path::PathBuf;

pub fn protocol_doc() -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/PROTOCOL.md");
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Rows of the markdown table between `<!-- name -->` and `<!-- /name -->`,
/// header and separator removed, cells trimmed.
pub fn table(doc: &str, name: &str) -> Vec<Vec<String>> {
    let start = format!("<!-- {name} -->");
    let end = format!("<!-- /{name} -->");
    let body = doc
        .split_once(&start)
        .and_then(|(_, rest)| rest.split_once(&end))
        .map(|(t, _)| t)
        .unwrap_or_else(|| panic!("table {name} not found"));
    body.lines()
        .map(str::trim)
        .filter(|l| l.starts_with('|'))
        .skip(2)
        .map(|l| {
            l.trim_matches('|')
                .split('|')
                .map(|c| c.trim().to_string())
                .collect()
        })
        .collect()
}

/// (endpoint name, [patient, expert, administrator]) with values
/// `allow`, `own`, `participant` or `deny`.
pub fn rbac_rows() -> Vec<(String, [String; 3])> {
    table(&protocol_doc(), "rbac-table")
        .into_iter()
        .map(|r| (r[0].clone(), [r[2].clone(), r[3].clone(), r[4].clone()]))
        .collect()
}

/// (state, [accept, post, fetch, terminate]) with a state name or an error code.
pub fn session_rows() -> Vec<(String, [String; 4])> {
    table(&protocol_doc(), "session-table")
        .into_iter()
        .map(|r| {
            (
                r[0].clone(),
                [r[1].clone(), r[2].clone(), r[3].clone(), r[4].clone()],
            )
        })
        .collect()
}
