use serde::Serialize;

use super::params::{CkstnParams, ParamTree};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    /// Element count per parameter path, in traversal order.
    pub by_path: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamCount {
    /// Sum over every path that starts with `prefix` followed by `.` or the
    /// end of the path.
    pub fn under(&self, prefix: &str) -> usize {
        self.by_path
            .iter()
            .filter(|(p, _)| {
                p == prefix || (p.starts_with(prefix) && p.as_bytes().get(prefix.len()) == Some(&b'.'))
            })
            .map(|(_, n)| n)
            .sum()
    }
}

pub fn param_count(params: &CkstnParams) -> ParamCount {
    let mut named = Vec::new();
    params.visit("", &mut named);
    let by_path: Vec<(String, usize)> = named.into_iter().map(|(p, t)| (p, t.len())).collect();
    let total = by_path.iter().map(|(_, n)| n).sum();
    ParamCount { by_path, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn input_projection_count() {
        let (p, _) = init_model(&ModelConfig::toy(), 0).unwrap();
        let c = param_count(&p);
        assert_eq!(c.under("visual.input_proj"), 16 * 32 + 32);
        assert_eq!(c.total, c.by_path.iter().map(|(_, n)| n).sum::<usize>());
        assert_eq!(c.under("visual") + c.under("textual") + c.under("shared"), c.total);
        assert_eq!(c.under("visual.l"), 0);
    }
}
