// SPDX-License-Identifier: Apache-2.0
#ifndef AGRIFUSE_DATES_HPP
#define AGRIFUSE_DATES_HPP

#include <compare>
#include <cstdio>
#include <string>

#include "agrifuse/errors.hpp"

namespace agrifuse {

/// Calendar date with day-level arithmetic (proleptic Gregorian).
struct Date {
  int year = 1970;
  int month = 1;
  int day = 1;

  auto operator<=>(const Date&) const = default;

  /// Days since 1970-01-01 (Howard Hinnant's civil-days algorithm).
  long to_days() const {
    int y = year;
    const int m = month;
    y -= m <= 2;
    const long era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153u * (m + (m > 2 ? -3 : 9)) + 2) / 5 + day - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<long>(doe) - 719468;
  }

  static Date from_days(long z) {
    z += 719468;
    const long era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const long y = static_cast<long>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    const unsigned d = doy - (153 * mp + 2) / 5 + 1;
    const unsigned m = mp + (mp < 10 ? 3 : -9);
    return Date{static_cast<int>(y + (m <= 2)), static_cast<int>(m),
                static_cast<int>(d)};
  }

  Date plus_days(long n) const { return from_days(to_days() + n); }

  std::string to_string() const {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02d", year, month, day);
    return buf;
  }

  /// Parses strict ISO-8601 "YYYY-MM-DD".
  static Date parse(const std::string& text) {
    int y = 0, m = 0, d = 0;
    char tail = 0;
    if (std::sscanf(text.c_str(), "%4d-%2d-%2d%c", &y, &m, &d, &tail) != 3 ||
        text.size() != 10 || m < 1 || m > 12 || d < 1 || d > 31) {
      throw InputError("invalid ISO date '" + text + "'");
    }
    Date date{y, m, d};
    if (from_days(date.to_days()) != date) {
      throw InputError("nonexistent calendar date '" + text + "'");
    }
    return date;
  }
};

inline long operator-(const Date& a, const Date& b) {
  return a.to_days() - b.to_days();
}

}  // namespace agrifuse

#endif  // AGRIFUSE_DATES_HPP
