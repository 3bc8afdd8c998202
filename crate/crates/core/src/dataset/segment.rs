use std::collections::BTreeMap;

use chrono::Duration;

use super::{CheckIn, DatasetError, Result, Trajectory, TrajectoryId, UserId};

/// Gaps of this length or more start a new trajectory.
pub const DEFAULT_GAP: Duration = Duration::hours(24);

/// Splits one user's time-ordered history into maximal runs whose consecutive
/// gaps are all strictly shorter than `gap`. Ids are assigned from `first_id`
/// upward.
pub fn segment_history(
    checkins: &[CheckIn],
    gap: Duration,
    first_id: TrajectoryId,
) -> Result<Vec<Trajectory>> {
    let Some(first) = checkins.first() else {
        return Ok(Vec::new());
    };
    if checkins.iter().any(|c| c.user != first.user) {
        return Err(DatasetError::MixedUsers);
    }
    if let Some(i) = checkins
        .windows(2)
        .position(|w| w[1].timestamp < w[0].timestamp)
    {
        return Err(DatasetError::Unsorted(i + 1));
    }

    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=checkins.len() {
        let boundary =
            i == checkins.len() || checkins[i].timestamp - checkins[i - 1].timestamp >= gap;
        if boundary {
            let id = TrajectoryId(first_id.0 + out.len() as u32);
            out.push(Trajectory::new(id, checkins[start..i].to_vec())?);
            start = i;
        }
    }
    Ok(out)
}

/// Groups check-ins by user (ascending dense id), orders each history by
/// timestamp (stable, so equal timestamps keep input order) and segments it.
/// Trajectory ids are dense and follow (user, time) order.
pub fn segment_all(checkins: &[CheckIn], gap: Duration) -> Result<Vec<Trajectory>> {
    let mut by_user: BTreeMap<UserId, Vec<CheckIn>> = BTreeMap::new();
    for c in checkins {
        by_user.entry(c.user).or_default().push(c.clone());
    }
    let mut out = Vec::new();
    for (_, mut history) in by_user {
        history.sort_by_key(|c| c.timestamp);
        let next = TrajectoryId(out.len() as u32);
        out.extend(segment_history(&history, gap, next)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::test_support::checkin;
    use super::*;

    fn hours(ts: &[i64]) -> Vec<CheckIn> {
        ts.iter().map(|&h| checkin(0, h as u32, h)).collect()
    }

    fn shape(trajs: &[Trajectory]) -> Vec<usize> {
        trajs.iter().map(Trajectory::len).collect()
    }

    #[test]
    fn gap_rule() {
        let t = segment_history(&hours(&[0, 5, 40]), DEFAULT_GAP, TrajectoryId(0)).unwrap();
        assert_eq!(shape(&t), vec![2, 1]);
        assert_eq!(t[1].id, TrajectoryId(1));
    }

    #[test]
    fn single_and_empty() {
        assert_eq!(
            shape(&segment_history(&hours(&[7]), DEFAULT_GAP, TrajectoryId(0)).unwrap()),
            vec![1]
        );
        assert!(segment_history(&[], DEFAULT_GAP, TrajectoryId(0))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn exactly_24h_splits() {
        let t = segment_history(&hours(&[0, 24]), DEFAULT_GAP, TrajectoryId(0)).unwrap();
        assert_eq!(shape(&t), vec![1, 1]);
        let c = hours(&[0, 24]);
        let mut almost = c.clone();
        almost[1].timestamp = c[1].timestamp - Duration::seconds(1);
        let t = segment_history(&almost, DEFAULT_GAP, TrajectoryId(0)).unwrap();
        assert_eq!(shape(&t), vec![2]);
    }

    #[test]
    fn unsorted_is_an_error() {
        assert!(matches!(
            segment_history(&hours(&[5, 1]), DEFAULT_GAP, TrajectoryId(0)),
            Err(DatasetError::Unsorted(1))
        ));
    }

    #[test]
    fn segment_all_groups_users() {
        let mut cs = vec![checkin(1, 1, 100), checkin(0, 2, 3), checkin(1, 3, 0), checkin(0, 4, 1)];
        cs.push(checkin(0, 5, 50));
        let t = segment_all(&cs, DEFAULT_GAP).unwrap();
        let users: Vec<u32> = t.iter().map(|t| t.user.0).collect();
        assert_eq!(users, vec![0, 0, 1, 1]);
        assert_eq!(t[0].poi_ids().iter().map(|p| p.0).collect::<Vec<_>>(), vec![4, 2]);
        let ids: Vec<u32> = t.iter().map(|t| t.id.0).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }
}
