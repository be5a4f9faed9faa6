//! Civil (proleptic Gregorian) date-time arithmetic on a fixed UTC offset.
//!
//! Interval ids are hours since the Unix epoch; conversion to weekday and
//! minutes-since-midnight is pure integer math, so no timezone database is
//! needed. Local civil time is obtained by adding a fixed offset in minutes.

/// Calendar timestamp, minute resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CivilTime {
    pub year: i64,
    pub month: u32,
    pub day: u32,
    pub hour: u32,
    pub minute: u32,
}

/// Days since 1970-01-01 for a civil date (Hinnant's days_from_civil).
pub fn days_from_civil(year: i64, month: u32, day: u32) -> i64 {
    let y = if month <= 2 { year - 1 } else { year };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = y - era * 400;
    let mp = (month as i64 + 9) % 12;
    let doy = (153 * mp + 2) / 5 + day as i64 - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}

/// Inverse of [`days_from_civil`].
pub fn civil_from_days(days: i64) -> (i64, u32, u32) {
    let z = days + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let day = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let month = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (if month <= 2 { y + 1 } else { y }, month, day)
}

impl CivilTime {
    /// Minutes since the Unix epoch.
    pub fn epoch_minutes(&self) -> i64 {
        days_from_civil(self.year, self.month, self.day) * 1440
            + self.hour as i64 * 60
            + self.minute as i64
    }

    pub fn from_epoch_minutes(total: i64) -> CivilTime {
        let days = total.div_euclid(1440);
        let rem = total.rem_euclid(1440);
        let (year, month, day) = civil_from_days(days);
        CivilTime {
            year,
            month,
            day,
            hour: (rem / 60) as u32,
            minute: (rem % 60) as u32,
        }
    }

    /// Day of week, Monday = 0 ... Sunday = 6.
    pub fn weekday(&self) -> u32 {
        // 1970-01-01 was a Thursday (index 3).
        (days_from_civil(self.year, self.month, self.day) + 3).rem_euclid(7) as u32
    }

    /// Minutes elapsed since midnight.
    pub fn minutes_of_day(&self) -> u32 {
        self.hour * 60 + self.minute
    }
}

/// Civil time of the start of an hourly interval, shifted by a fixed UTC
/// offset in minutes.
pub fn interval_civil(interval_id: i64, utc_offset_minutes: i32) -> CivilTime {
    CivilTime::from_epoch_minutes(interval_id * 60 + utc_offset_minutes as i64)
}
