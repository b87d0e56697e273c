//! Weekly-hour binning. Day of week counts from Monday = 0 in UTC.

pub const HOURS_PER_WEEK: usize = 168;
pub const SECONDS_PER_DAY: i64 = 86_400;
pub const SECONDS_PER_WEEK: i64 = 7 * SECONDS_PER_DAY;

/// 2020-03-02 00:00:00 UTC, a Monday.
pub const DEFAULT_START: i64 = 1_583_107_200;

pub fn day_of_week(ts: i64) -> usize {
    // 1970-01-01 was a Thursday.
    (ts.div_euclid(SECONDS_PER_DAY) + 3).rem_euclid(7) as usize
}

pub fn seconds_into_day(ts: i64) -> i64 {
    ts.rem_euclid(SECONDS_PER_DAY)
}

pub fn hour_of_day(ts: i64) -> usize {
    (seconds_into_day(ts) / 3600) as usize
}

pub fn weekly_hour_bin(ts: i64) -> usize {
    day_of_week(ts) * 24 + hour_of_day(ts)
}

/// Timestamp of the Monday 00:00 starting the week that contains `ts`.
pub fn week_start(ts: i64) -> i64 {
    let day = ts.div_euclid(SECONDS_PER_DAY);
    (day - day_of_week(ts) as i64) * SECONDS_PER_DAY
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_start_is_monday_midnight() {
        assert_eq!(day_of_week(DEFAULT_START), 0);
        assert_eq!(hour_of_day(DEFAULT_START), 0);
        assert_eq!(week_start(DEFAULT_START + 3 * SECONDS_PER_DAY + 5), DEFAULT_START);
    }

    #[test]
    fn bins_cover_week() {
        assert_eq!(weekly_hour_bin(DEFAULT_START + 9 * 3600), 9);
        assert_eq!(weekly_hour_bin(DEFAULT_START + SECONDS_PER_WEEK - 1), 167);
        assert_eq!(weekly_hour_bin(DEFAULT_START + SECONDS_PER_WEEK), 0);
        assert_eq!(day_of_week(0), 3);
    }
}
