//! Reader and writer for the subset of the MATPOWER case format used here:
//! `mpc.baseMVA` plus the `bus`, `gen`, `branch` and `gencost` matrices.
//! Anything else assigned to `mpc.*` is skipped and noted in the warnings.

use std::fmt::Write as _;

use super::{BranchRow, BusRow, GenRow, LoadRow, NetworkSpec};
use crate::error::{Error, Result};

const BUS_COLS: usize = 13;
const GEN_COLS: usize = 10;
const BRANCH_COLS: usize = 11;

struct Matrix {
    rows: Vec<Vec<f64>>,
    line: usize,
}

/// Parses MATPOWER case text into raw tables.
pub fn parse_matpower_case(text: &str) -> Result<NetworkSpec> {
    let mut base_mva = None;
    let mut bus = None;
    let mut gen = None;
    let mut branch = None;
    let mut gencost = None;
    let mut warnings = Vec::new();

    let lines: Vec<&str> = text.lines().collect();
    let mut idx = 0;
    while idx < lines.len() {
        let line_no = idx + 1;
        let code = strip_comment(lines[idx]).trim();
        idx += 1;
        if code.is_empty() || code.starts_with("function") {
            continue;
        }
        let Some(rest) = code.strip_prefix("mpc.") else {
            continue;
        };
        let Some((name, value)) = rest.split_once('=') else {
            continue;
        };
        let name = name.trim();
        let value = value.trim();

        if value.starts_with('[') {
            let (matrix, next) = read_matrix(&lines, idx - 1, line_no)?;
            idx = next;
            match name {
                "bus" => bus = Some(matrix),
                "gen" => gen = Some(matrix),
                "branch" => branch = Some(matrix),
                "gencost" => gencost = Some(matrix),
                other => warnings.push(format!("line {line_no}: ignored matrix `mpc.{other}`")),
            }
        } else if value.starts_with('{') {
            idx = skip_cell(&lines, idx - 1, line_no)?;
            warnings.push(format!("line {line_no}: ignored cell array `mpc.{name}`"));
        } else if name == "baseMVA" {
            let token = value.trim_end_matches(';').trim();
            let col = column_of(lines[line_no - 1], token);
            base_mva = Some(parse_number(token, line_no, col)?);
        } else if name != "version" {
            warnings.push(format!("line {line_no}: ignored assignment `mpc.{name}`"));
        }
    }

    let bus = bus.ok_or(Error::MissingSection("bus"))?;
    let branch = branch.ok_or(Error::MissingSection("branch"))?;

    let mut buses = Vec::with_capacity(bus.rows.len());
    let mut loads = Vec::new();
    for (k, row) in bus.rows.iter().enumerate() {
        check_width(row, BUS_COLS, "bus", bus.line, k)?;
        let id = row[0] as usize;
        buses.push(BusRow {
            bus_i: id,
            bus_type: row[1] as i32,
            gs: row[4],
            bs: row[5],
            vm: row[7],
            va: row[8],
            base_kv: row[9],
            vmax: row[11],
            vmin: row[12],
        });
        if row[2] != 0.0 || row[3] != 0.0 {
            loads.push(LoadRow {
                bus: id,
                pd: row[2],
                qd: row[3],
            });
        }
    }

    let mut generators = Vec::new();
    if let Some(gen) = gen {
        for (k, row) in gen.rows.iter().enumerate() {
            check_width(row, GEN_COLS, "gen", gen.line, k)?;
            generators.push(GenRow {
                bus: row[0] as usize,
                pg: row[1],
                qg: row[2],
                qmax: row[3],
                qmin: row[4],
                vg: row[5],
                mbase: row[6],
                status: row[7] as i32,
                pmax: row[8],
                pmin: row[9],
            });
        }
    }

    let mut branches = Vec::with_capacity(branch.rows.len());
    for (k, row) in branch.rows.iter().enumerate() {
        check_width(row, BRANCH_COLS, "branch", branch.line, k)?;
        branches.push(BranchRow {
            f_bus: row[0] as usize,
            t_bus: row[1] as usize,
            r: row[2],
            x: row[3],
            b: row[4],
            rate_a: row[5],
            ratio: row[8],
            angle: row[9],
            status: row[10] as i32,
        });
    }

    Ok(NetworkSpec {
        base_mva: base_mva.unwrap_or(100.0),
        buses,
        loads,
        generators,
        branches,
        gencost: gencost.map(|m| m.rows).unwrap_or_default(),
        warnings,
    })
}

/// Writes a spec back out in MATPOWER syntax. Parsing the output yields an
/// identical [`NetworkSpec`] (warnings aside).
pub fn write_matpower_case(spec: &NetworkSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "function mpc = case_export");
    let _ = writeln!(out, "mpc.version = '2';");
    let _ = writeln!(out, "mpc.baseMVA = {};", spec.base_mva);
    let _ = writeln!(out, "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin");
    let _ = writeln!(out, "mpc.bus = [");
    for b in &spec.buses {
        let (pd, qd) = spec
            .loads
            .iter()
            .filter(|l| l.bus == b.bus_i)
            .fold((0.0, 0.0), |acc, l| (acc.0 + l.pd, acc.1 + l.qd));
        let _ = writeln!(
            out,
            "\t{}\t{}\t{}\t{}\t{}\t{}\t1\t{}\t{}\t{}\t1\t{}\t{};",
            b.bus_i, b.bus_type, pd, qd, b.gs, b.bs, b.vm, b.va, b.base_kv, b.vmax, b.vmin
        );
    }
    let _ = writeln!(out, "];");
    let _ = writeln!(out, "mpc.gen = [");
    for g in &spec.generators {
        let _ = writeln!(
            out,
            "\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{};",
            g.bus, g.pg, g.qg, g.qmax, g.qmin, g.vg, g.mbase, g.status, g.pmax, g.pmin
        );
    }
    let _ = writeln!(out, "];");
    let _ = writeln!(out, "mpc.branch = [");
    for br in &spec.branches {
        let _ = writeln!(
            out,
            "\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{};",
            br.f_bus, br.t_bus, br.r, br.x, br.b, br.rate_a, br.rate_a, br.rate_a, br.ratio, br.angle, br.status
        );
    }
    let _ = writeln!(out, "];");
    if !spec.gencost.is_empty() {
        let _ = writeln!(out, "mpc.gencost = [");
        for row in &spec.gencost {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "\t{};", cells.join("\t"));
        }
        let _ = writeln!(out, "];");
    }
    out
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

fn column_of(line: &str, token: &str) -> usize {
    line.find(token).map(|p| p + 1).unwrap_or(1)
}

fn parse_number(token: &str, line: usize, column: usize) -> Result<f64> {
    token.parse::<f64>().map_err(|_| Error::Syntax {
        line,
        column,
        message: format!("non-numeric token `{token}`"),
    })
}

fn check_width(row: &[f64], width: usize, name: &str, line: usize, k: usize) -> Result<()> {
    if row.len() < width {
        return Err(Error::Syntax {
            line,
            column: 1,
            message: format!(
                "row {} of `mpc.{name}` has {} columns, expected at least {width}",
                k + 1,
                row.len()
            ),
        });
    }
    Ok(())
}

/// Reads a `[ ... ]` matrix starting on line index `start`. Returns the
/// matrix and the index of the first line after the closing bracket.
fn read_matrix(lines: &[&str], start: usize, line_no: usize) -> Result<(Matrix, usize)> {
    let mut rows = Vec::new();
    let mut current: Vec<f64> = Vec::new();
    let mut idx = start;
    let mut opened = false;

    while idx < lines.len() {
        let raw = lines[idx];
        let code = strip_comment(raw);
        let mut body = code;
        let mut offset = 0;
        if !opened {
            let pos = code.find('[').expect("caller checked for `[`");
            offset = pos + 1;
            body = &code[offset..];
            opened = true;
        }
        let mut closed = false;
        if let Some(pos) = body.find(']') {
            body = &body[..pos];
            closed = true;
        }

        let mut cursor = offset;
        for segment in body.split_inclusive(';') {
            let ends_row = segment.ends_with(';');
            let seg = segment.trim_end_matches(';');
            let mut search_from = 0;
            for token in seg.split(|c: char| c.is_whitespace() || c == ',') {
                if token.is_empty() {
                    continue;
                }
                let rel = seg[search_from..].find(token).map(|p| p + search_from).unwrap_or(0);
                search_from = rel + token.len();
                current.push(parse_number(token, idx + 1, cursor + rel + 1)?);
            }
            cursor += segment.len();
            if ends_row && !current.is_empty() {
                rows.push(std::mem::take(&mut current));
            }
        }
        // A newline also terminates a row in MATLAB matrix syntax.
        if !current.is_empty() {
            rows.push(std::mem::take(&mut current));
        }
        idx += 1;
        if closed {
            return Ok((Matrix { rows, line: line_no }, idx));
        }
    }
    Err(Error::Syntax {
        line: line_no,
        column: 1,
        message: "unterminated matrix".into(),
    })
}

fn skip_cell(lines: &[&str], start: usize, line_no: usize) -> Result<usize> {
    for (idx, raw) in lines.iter().enumerate().skip(start) {
        if strip_comment(raw).contains('}') {
            return Ok(idx + 1);
        }
    }
    Err(Error::Syntax {
        line: line_no,
        column: 1,
        message: "unterminated cell array".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CASE9: &str = include_str!("../../data/case9.m");

    #[test]
    fn case9_counts() {
        let spec = parse_matpower_case(CASE9).unwrap();
        assert_eq!(spec.buses.len(), 9);
        assert_eq!(spec.branches.len(), 9);
        assert_eq!(spec.generators.len(), 3);
        assert_eq!(spec.loads.len(), 3);
        assert_eq!(spec.gencost.len(), 3);
        assert_eq!(spec.base_mva, 100.0);
        assert_eq!(spec.loads[1].bus, 7);
        assert_eq!(spec.loads[1].pd, 100.0);
        assert_eq!(spec.branches[6].t_bus, 2);
    }

    #[test]
    fn empty_text_is_missing_bus() {
        assert!(matches!(parse_matpower_case(""), Err(Error::MissingSection("bus"))));
    }

    #[test]
    fn missing_branch_section() {
        let text = "mpc.baseMVA = 100;\nmpc.bus = [\n1 3 0 0 0 0 1 1 0 345 1 1.1 0.9;\n];\n";
        assert!(matches!(parse_matpower_case(text), Err(Error::MissingSection("branch"))));
    }

    #[test]
    fn extra_comment_is_transparent() {
        let commented = CASE9.replacen("mpc.bus = [", "% an extra remark\nmpc.bus = [", 1);
        assert_eq!(
            parse_matpower_case(CASE9).unwrap(),
            parse_matpower_case(&commented).unwrap()
        );
    }

    #[test]
    fn bad_token_reports_position() {
        let text = CASE9.replacen("0.0576", "0.05x6", 1);
        match parse_matpower_case(&text) {
            Err(Error::Syntax { line, column, .. }) => {
                let offending = text.lines().nth(line - 1).unwrap();
                assert!(offending[column - 1..].starts_with("0.05x6"));
            }
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn unterminated_matrix() {
        let text = "mpc.bus = [\n1 3 0 0 0 0 1 1 0 345 1 1.1 0.9;\n";
        assert!(matches!(parse_matpower_case(text), Err(Error::Syntax { .. })));
    }

    #[test]
    fn unknown_matrices_warn() {
        let text = format!("{CASE9}\nmpc.areas = [\n1 5;\n];\nmpc.bus_name = {{\n'a';\n}};\n");
        let spec = parse_matpower_case(&text).unwrap();
        assert_eq!(spec.warnings.len(), 2);
        assert_eq!(spec.buses.len(), 9);
    }

    #[test]
    fn single_line_matrix_and_commas() {
        let text = "mpc.baseMVA = 10;\nmpc.bus = [1, 3, 0, 0, 0, 0, 1, 1, 0, 1, 1, 1.1, 0.9; 2 1 5 1 0 0 1 1 0 1 1 1.1 0.9];\n\
                    mpc.branch = [1 2 0.01 0.1 0 0 0 0 0 0 1];\n";
        let spec = parse_matpower_case(text).unwrap();
        assert_eq!(spec.buses.len(), 2);
        assert_eq!(spec.loads, vec![LoadRow { bus: 2, pd: 5.0, qd: 1.0 }]);
        assert_eq!(spec.base_mva, 10.0);
    }

    #[test]
    fn write_then_parse_is_identity() {
        let spec = parse_matpower_case(CASE9).unwrap();
        let again = parse_matpower_case(&write_matpower_case(&spec)).unwrap();
        assert_eq!(spec, again);
    }
}
