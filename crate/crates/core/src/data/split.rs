use super::posts::Post;
use crate::error::{Error, Result};

/// Indices into the post list for each partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn ids<'a>(indices: &[usize], posts: &'a [Post]) -> Vec<&'a str> {
        indices.iter().map(|&i| posts[i].id.as_str()).collect()
    }
}

/// Ranks posts by `sort_key` (descending, ties by id ascending); the top
/// ⌈N/10⌉ become the test set, the next ⌈N/10⌉ validation, the rest training.
pub fn make_splits(posts: &[Post]) -> Result<DatasetSplit> {
    let n = posts.len();
    if n < 10 {
        return Err(Error::TooSmall(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        posts[b]
            .sort_key
            .cmp(&posts[a].sort_key)
            .then_with(|| posts[a].id.cmp(&posts[b].id))
    });
    let tenth = n.div_ceil(10);
    let test = order[..tenth].to_vec();
    let validation = order[tenth..2 * tenth].to_vec();
    let train = order[2 * tenth..].to_vec();
    Ok(DatasetSplit {
        train,
        validation,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::WhitespaceTokenizer;

    fn posts(keys: &[i64]) -> Vec<Post> {
        keys.iter()
            .enumerate()
            .map(|(i, &k)| {
                Post::new(
                    format!("p{i:03}"),
                    Some("t".into()),
                    None,
                    "l",
                    k,
                    &WhitespaceTokenizer,
                )
            })
            .collect()
    }

    #[test]
    fn hundred_distinct_keys() {
        let keys: Vec<i64> = (0..100).collect();
        let ps = posts(&keys);
        let s = make_splits(&ps).unwrap();
        assert_eq!(
            (s.test.len(), s.validation.len(), s.train.len()),
            (10, 10, 80)
        );
        let mut top: Vec<i64> = s.test.iter().map(|&i| ps[i].sort_key).collect();
        top.sort_unstable();
        assert_eq!(top, (90..100).collect::<Vec<_>>());
    }

    #[test]
    fn equal_keys_fall_back_to_id_order() {
        let ps = posts(&[7; 20]);
        let s = make_splits(&ps).unwrap();
        assert_eq!(DatasetSplit::ids(&s.test, &ps), vec!["p000", "p001"]);
        assert_eq!(DatasetSplit::ids(&s.validation, &ps), vec!["p002", "p003"]);
    }

    #[test]
    fn ceiling_arithmetic() {
        let s = make_splits(&posts(&[1; 10])).unwrap();
        assert_eq!((s.test.len(), s.validation.len(), s.train.len()), (1, 1, 8));
        let s = make_splits(&posts(&[1; 11])).unwrap();
        assert_eq!((s.test.len(), s.validation.len(), s.train.len()), (2, 2, 7));
        assert!(matches!(
            make_splits(&posts(&[1; 9])),
            Err(Error::TooSmall(9))
        ));
    }
}
