use serde::Serialize;

/// Writes records either as JSON lines or as one aligned table.
pub struct Out {
    pub machine: bool,
}

impl Out {
    pub fn records<T: Serialize>(&self, headers: &[&str], rows: &[T], cells: impl Fn(&T) -> Vec<String>) {
        if self.machine {
            for r in rows {
                println!("{}", serde_json::to_string(r).expect("records serialize"));
            }
        } else {
            let body: Vec<Vec<String>> = rows.iter().map(cells).collect();
            print!("{}", table(headers, &body));
        }
    }

    pub fn record<T: Serialize>(&self, headers: &[&str], row: &T, cells: impl Fn(&T) -> Vec<String>) {
        self.records(headers, std::slice::from_ref(row), cells)
    }

    /// A domain error: a structured record on stdout in machine mode, a message on stderr otherwise.
    pub fn error(&self, kind: &str, message: &str) {
        if self.machine {
            let v = serde_json::json!({ "error": kind, "message": message });
            println!("{v}");
        } else {
            eprintln!("error: {kind}: {message}");
        }
    }
}

pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(padded.join("  ").trim_end());
        out.push('\n');
    };
    line(headers.to_vec(), &mut out);
    for row in rows {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

pub fn or_dash(v: Option<&str>) -> String {
    v.unwrap_or("-").to_owned()
}
