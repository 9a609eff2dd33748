#include "s2ip/series_data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "s2ip/errors.hpp"

namespace s2ip {

namespace {

// Tolerance for floor(fraction * T) so that 0.1 * 100 does not become 9.
constexpr double kFloorSlack = 1e-9;

std::size_t floor_fraction(double fraction, std::size_t total) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(total) + kFloorSlack));
}

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r' || s[b] == '"')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r' || s[e - 1] == '"')) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      out.push_back(trim(std::string_view(line).substr(start, i - start)));
      start = i + 1;
    }
  }
  return out;
}

std::optional<std::int64_t> parse_int(const std::string& s) {
  std::int64_t v = 0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  if (b != e && *b == '+') ++b;
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e || b == e) return std::nullopt;
  return v;
}

bool is_missing_token(const std::string& s) {
  return s.empty() || s == "NaN" || s == "nan" || s == "NA" || s == "null";
}

std::optional<double> parse_real(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) return std::nullopt;
  if (!std::isfinite(v)) return std::nullopt;
  return v;
}

// Howard Hinnant's civil-date algorithms.
std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, std::int64_t& y, unsigned& m, unsigned& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  y = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = doy - (153 * mp + 2) / 5 + 1;
  m = mp < 10 ? mp + 3 : mp - 9;
  y += m <= 2;
}

}  // namespace

// ---------------------------------------------------------------------------
// SeriesFrame

SeriesFrame::SeriesFrame(std::vector<std::int64_t> timestamps, std::vector<double> values,
                         std::vector<std::string> channel_names, TimestampKind kind)
    : timestamps_(std::move(timestamps)),
      values_(std::move(values)),
      channel_names_(std::move(channel_names)),
      kind_(kind) {
  if (channel_names_.empty()) throw ValidationError("series needs at least one channel");
  if (values_.size() != timestamps_.size() * channel_names_.size()) {
    throw ValidationError("series values do not match T x N = " + std::to_string(timestamps_.size()) + " x " +
                          std::to_string(channel_names_.size()));
  }
  for (std::size_t t = 1; t < timestamps_.size(); ++t) {
    if (timestamps_[t] <= timestamps_[t - 1]) {
      throw ValidationError("timestamps must be strictly increasing (row " + std::to_string(t) + ")");
    }
  }
  for (double v : values_) {
    if (!std::isfinite(v)) throw ValidationError("series contains a non-finite value");
  }
}

std::vector<double> SeriesFrame::channel(std::size_t n) const {
  std::vector<double> out(length());
  for (std::size_t t = 0; t < length(); ++t) out[t] = at(t, n);
  return out;
}

SeriesFrame SeriesFrame::rows(std::size_t begin, std::size_t count) const {
  if (begin + count > length()) throw ValidationError("row range exceeds series length");
  const std::size_t n = channels();
  std::vector<std::int64_t> ts(timestamps_.begin() + static_cast<std::ptrdiff_t>(begin),
                               timestamps_.begin() + static_cast<std::ptrdiff_t>(begin + count));
  std::vector<double> vals(values_.begin() + static_cast<std::ptrdiff_t>(begin * n),
                           values_.begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  SeriesFrame out;
  out.timestamps_ = std::move(ts);
  out.values_ = std::move(vals);
  out.channel_names_ = channel_names_;
  out.kind_ = kind_;
  return out;
}

SeriesFrame SeriesFrame::with_values(std::vector<double> values) const {
  return SeriesFrame(timestamps_, std::move(values), channel_names_, kind_);
}

std::string SeriesFrame::format_timestamp(std::int64_t ts) const {
  return kind_ == TimestampKind::index ? std::to_string(ts) : format_iso8601(ts);
}

// ---------------------------------------------------------------------------
// CSV

std::optional<std::int64_t> parse_iso8601(const std::string& text) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  char sep = 0;
  int consumed = 0;
  if (std::sscanf(text.c_str(), "%4d-%2d-%2d%n", &y, &mo, &d, &consumed) != 3 || consumed != 10) {
    return std::nullopt;
  }
  if (text.size() > 10) {
    int rest = 0;
    const int got = std::sscanf(text.c_str() + 10, "%c%2d:%2d%n", &sep, &h, &mi, &rest);
    if (got != 3 || (sep != ' ' && sep != 'T')) return std::nullopt;
    std::size_t pos = 10 + static_cast<std::size_t>(rest);
    if (pos < text.size()) {
      int more = 0;
      if (std::sscanf(text.c_str() + pos, ":%2d%n", &s, &more) != 1) return std::nullopt;
      pos += static_cast<std::size_t>(more);
      // Fractional seconds and a trailing Z are accepted and ignored.
      while (pos < text.size() && (std::isdigit(static_cast<unsigned char>(text[pos])) || text[pos] == '.')) ++pos;
      if (pos < text.size() && text[pos] == 'Z') ++pos;
      if (pos != text.size()) return std::nullopt;
    }
  }
  if (mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || s > 60) return std::nullopt;
  return days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d)) * 86400 + h * 3600 + mi * 60 + s;
}

std::string format_iso8601(std::int64_t epoch_seconds) {
  std::int64_t days = epoch_seconds / 86400;
  std::int64_t secs = epoch_seconds % 86400;
  if (secs < 0) {
    secs += 86400;
    --days;
  }
  std::int64_t y = 0;
  unsigned m = 0, d = 0;
  civil_from_days(days, y, m, d);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04lld-%02u-%02u %02lld:%02lld:%02lld", static_cast<long long>(y), m, d,
                static_cast<long long>(secs / 3600), static_cast<long long>((secs % 3600) / 60),
                static_cast<long long>(secs % 60));
  return buf;
}

SeriesFrame parse_csv(const std::string& text, const CsvSchema& schema) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty()) {
      header = split_fields(line);
      break;
    }
  }
  if (header.size() < 2) throw ValidationError("csv needs a header with a timestamp column and at least one value column");

  std::vector<std::size_t> keep;
  std::vector<std::string> names;
  if (schema.columns.empty()) {
    for (std::size_t c = 1; c < header.size(); ++c) {
      keep.push_back(c);
      names.push_back(header[c]);
    }
  } else {
    for (const auto& want : schema.columns) {
      auto it = std::find(header.begin() + 1, header.end(), want);
      if (it == header.end()) throw ValidationError("csv has no column named '" + want + "'");
      keep.push_back(static_cast<std::size_t>(it - header.begin()));
      names.push_back(want);
    }
  }

  std::vector<std::int64_t> ts;
  std::vector<double> values;
  std::optional<TimestampKind> kind;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != header.size()) {
      throw ParseError(line_no, "expected " + std::to_string(header.size()) + " fields, found " +
                                    std::to_string(fields.size()));
    }
    std::int64_t stamp = 0;
    if (auto i = parse_int(fields[0]); i && kind != TimestampKind::iso8601) {
      stamp = *i;
      kind = TimestampKind::index;
    } else if (auto iso = parse_iso8601(fields[0]); iso && kind != TimestampKind::index) {
      stamp = *iso;
      kind = TimestampKind::iso8601;
    } else {
      throw ParseError(line_no, "cannot parse timestamp '" + fields[0] + "'");
    }
    if (!ts.empty() && stamp <= ts.back()) {
      throw ValidationError("timestamps must be strictly increasing (row " + std::to_string(line_no) + ")");
    }
    ts.push_back(stamp);
    for (std::size_t k = 0; k < keep.size(); ++k) {
      const std::string& f = fields[keep[k]];
      if (is_missing_token(f)) {
        if (schema.missing == MissingPolicy::reject) {
          throw ValidationError("missing value in column '" + names[k] + "' at row " + std::to_string(line_no));
        }
        if (ts.size() == 1) {
          throw ValidationError("cannot forward-fill column '" + names[k] + "' at row " + std::to_string(line_no) +
                                ": no earlier value");
        }
        values.push_back(values[values.size() - keep.size()]);
        continue;
      }
      auto v = parse_real(f);
      if (!v) throw ParseError(line_no, "cannot parse value '" + f + "' in column '" + names[k] + "'");
      values.push_back(*v);
    }
  }
  if (ts.empty()) throw ValidationError("csv contains no data rows");
  return SeriesFrame(std::move(ts), std::move(values), std::move(names), kind.value_or(TimestampKind::index));
}

SeriesFrame load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open csv file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_csv(buf.str(), schema);
}

void write_csv(const std::string& path, const SeriesFrame& frame) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << (frame.timestamp_kind() == TimestampKind::index ? "t" : "date");
  for (const auto& n : frame.channel_names()) out << ',' << n;
  out << '\n';
  char buf[64];
  for (std::size_t t = 0; t < frame.length(); ++t) {
    out << frame.format_timestamp(frame.timestamps()[t]);
    for (std::size_t c = 0; c < frame.channels(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", frame.at(t, c));
      out << ',' << buf;
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Splits and windows

void SplitSpec::validate() const {
  for (double f : {train_fraction, val_fraction, test_fraction}) {
    if (!(f >= 0.0 && f <= 1.0)) throw ValidationError("split fractions must lie in [0, 1]");
  }
  if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
    throw ValidationError("split fractions must sum to 1");
  }
  if (few_shot_fraction && !(*few_shot_fraction > 0.0 && *few_shot_fraction <= 1.0)) {
    throw ValidationError("few_shot_fraction must lie in (0, 1]");
  }
}

void WindowSpec::validate() const {
  if (lookback == 0 || horizon == 0 || stride == 0) {
    throw ValidationError("lookback, horizon and stride must be positive");
  }
}

SplitResult chronological_split(const SeriesFrame& frame, const SplitSpec& spec,
                                const std::optional<WindowSpec>& window) {
  spec.validate();
  const std::size_t total = frame.length();
  const std::size_t n_val = floor_fraction(spec.val_fraction, total);
  const std::size_t n_test = floor_fraction(spec.test_fraction, total);
  const std::size_t n_train = total - n_val - n_test;
  SplitResult out{frame.rows(0, n_train), frame.rows(n_train, n_val), frame.rows(n_train + n_val, n_test), {}};
  if (window) {
    const std::size_t need = window->lookback + window->horizon;
    const std::pair<const char*, std::size_t> parts[] = {{"train", n_train}, {"val", n_val}, {"test", n_test}};
    for (const auto& [name, size] : parts) {
      if (size < need) {
        out.warnings.push_back(std::string(name) + " split has " + std::to_string(size) +
                               " rows, fewer than lookback + horizon = " + std::to_string(need));
      }
    }
  }
  return out;
}

SeriesFrame few_shot_truncate(const SeriesFrame& train, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("few-shot fraction must lie in (0, 1]");
  const std::size_t keep = floor_fraction(fraction, train.length());
  if (keep == 0) throw ValidationError("few-shot truncation leaves no rows");
  return train.rows(0, keep);
}

std::size_t window_count(std::size_t length, const WindowSpec& spec) {
  const std::size_t need = spec.lookback + spec.horizon;
  if (length < need) return 0;
  return (length - need) / spec.stride + 1;
}

std::vector<Window> windows(const SeriesFrame& frame, const WindowSpec& spec) {
  spec.validate();
  const std::size_t per_channel = window_count(frame.length(), spec);
  std::vector<Window> out;
  out.reserve(per_channel * frame.channels());
  for (std::size_t c = 0; c < frame.channels(); ++c) {
    const auto series = frame.channel(c);
    for (std::size_t k = 0; k < per_channel; ++k) {
      const std::size_t off = k * spec.stride;
      Window w;
      w.channel = c;
      w.offset = off;
      w.input.assign(series.begin() + static_cast<std::ptrdiff_t>(off),
                     series.begin() + static_cast<std::ptrdiff_t>(off + spec.lookback));
      w.target.assign(series.begin() + static_cast<std::ptrdiff_t>(off + spec.lookback),
                      series.begin() + static_cast<std::ptrdiff_t>(off + spec.lookback + spec.horizon));
      out.push_back(std::move(w));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Standardizer

Standardizer Standardizer::fit(const SeriesFrame& frame) {
  if (frame.length() == 0) throw ValidationError("cannot fit standardizer on an empty series");
  Standardizer s;
  const std::size_t n = frame.channels();
  s.mean_.assign(n, 0.0);
  s.scale_.assign(n, 1.0);
  for (std::size_t c = 0; c < n; ++c) {
    double mu = 0.0;
    for (std::size_t t = 0; t < frame.length(); ++t) mu += frame.at(t, c);
    mu /= static_cast<double>(frame.length());
    double var = 0.0;
    for (std::size_t t = 0; t < frame.length(); ++t) var += (frame.at(t, c) - mu) * (frame.at(t, c) - mu);
    var /= static_cast<double>(frame.length());
    s.mean_[c] = mu;
    s.scale_[c] = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  return s;
}

Standardizer Standardizer::identity(std::size_t channels) {
  Standardizer s;
  s.mean_.assign(channels, 0.0);
  s.scale_.assign(channels, 1.0);
  return s;
}

SeriesFrame Standardizer::transform(const SeriesFrame& frame) const {
  if (frame.channels() != mean_.size()) throw ValidationError("standardizer channel count mismatch");
  std::vector<double> vals(frame.values().begin(), frame.values().end());
  const std::size_t n = frame.channels();
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = forward(i % n, vals[i]);
  return frame.with_values(std::move(vals));
}

}  // namespace s2ip
