#pragma once

#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "treenet/module.hpp"

namespace treenet {

using Count = std::int64_t;

namespace detail {
// Closed forms are evaluated in 128-bit and narrowed with a range check.
inline Count narrow(__int128 v) {
    if (v > std::numeric_limits<Count>::max() || v < std::numeric_limits<Count>::min())
        throw Error("count overflows 64 bits");
    return static_cast<Count>(v);
}
inline void require_positive(std::initializer_list<Count> args, const char* fn) {
    for (Count a : args)
        if (a <= 0) throw Error(std::string(fn) + ": arguments must be positive");
}
}  // namespace detail

/// Weight parameters of an OSA block (BN excluded):
/// 9 k_in k + 9 (l-1) k^2 + (k_in + l k) k_cat
inline Count osa_params(Count k_in, Count k, Count depth, Count k_cat) {
    detail::require_positive({k_in, k, depth, k_cat}, "osa_params");
    using W = __int128;
    return detail::narrow(W(9) * k_in * k + W(9) * (depth - 1) * k * k + (W(k_in) + W(k) * depth) * k_cat);
}

/// Weight parameters of a basic Tree block (BN excluded):
/// k_in (k + 9k') + (l+8) k k' + 9 (l-2) k'^2 + (l+1) k k_cat
inline Count tree_params(Count k_in, Count k, Count k_prime, Count depth, Count k_cat) {
    detail::require_positive({k_in, k, k_prime, k_cat}, "tree_params");
    if (depth < 2) throw Error("tree_params: depth must be >= 2");
    using W = __int128;
    return detail::narrow(W(k_in) * (W(k) + W(9) * k_prime) + W(depth + 8) * k * k_prime +
                          W(9) * (depth - 2) * k_prime * k_prime + W(depth + 1) * k * k_cat);
}

/// OSA minus Tree parameters with k_in = k_cat = 2k:
/// 9 (l+1) k^2 - (l+26) k k' - 9 (l-2) k'^2
inline Count param_diff(Count k, Count k_prime, Count depth) {
    if (depth < 2) throw Error("param_diff: depth must be >= 2");
    using W = __int128;
    return detail::narrow(W(9) * (depth + 1) * k * k - W(depth + 26) * k * k_prime -
                          W(9) * (depth - 2) * k_prime * k_prime);
}

/// Memory access of a 3x3 conv keeping h x w: hw(c + k) + 9ck
inline Count mac_standard(Count h, Count w, Count c, Count k) {
    detail::require_positive({h, w, c, k}, "mac_standard");
    using W = __int128;
    return detail::narrow(W(h) * w * (W(c) + k) + W(9) * c * k);
}

/// Grouped 3x3 conv with k_hat filters in g groups: hw(c + k_hat) + 9 c k_hat / g
inline Count mac_group(Count h, Count w, Count c, Count k_hat, Count groups) {
    detail::require_positive({h, w, c, k_hat, groups}, "mac_group");
    if (k_hat % groups != 0) throw Error("mac_group: filters not divisible by group count");
    using W = __int128;
    return detail::narrow(W(h) * w * (W(c) + k_hat) + W(9) * c * (k_hat / groups));
}

/// Extra memory access of a g-group conv with 4k filters over a standard conv with k:
/// 3k (hw - 3c (1 - 4/g)), evaluated exactly as 3k hw - 9ck + 9c (4k/g).
inline Count mac_increment(Count h, Count w, Count c, Count k, Count groups) {
    detail::require_positive({h, w, c, k, groups}, "mac_increment");
    if ((4 * k) % groups != 0) throw Error("mac_increment: 4k not divisible by group count");
    using W = __int128;
    return detail::narrow(W(3) * k * h * w - W(9) * c * k + W(9) * c * ((4 * k) / groups));
}

struct CostRow {
    std::string layer;
    OpKind kind = OpKind::Conv;
    Count params = 0;          // weights and biases
    Count params_with_bn = 0;  // plus BN gamma/beta
    Count flops = 0;           // multiply-accumulates, or elementwise count for non-compute ops
    Count mac = 0;             // elements read and written, weights included

    bool is_compute() const {
        return kind == OpKind::Conv || kind == OpKind::FullyConnected || kind == OpKind::Conv1dChannels;
    }
    bool operator==(const CostRow&) const = default;
};

struct CostTotals {
    Count params = 0;
    Count params_with_bn = 0;
    Count params_no_classifier = 0;
    Count params_with_bn_no_classifier = 0;
    Count compute_flops = 0;
    Count elementwise_flops = 0;
    Count flops = 0;
    Count mac = 0;
};

inline constexpr const char* kCostConvention =
    "flops: 1 multiply-accumulate = 1 unit (conv, fc, eca conv1d); bn/relu/add/sigmoid/scale count one "
    "unit per output element, pooling one per input element, concat zero. "
    "mac: input + output elements + parameters, in elements. "
    "params: weights + biases; params_with_bn adds BN gamma/beta (running stats excluded).";

struct CostReport {
    std::string convention = kCostConvention;
    std::string model;
    Shape input;
    std::vector<CostRow> rows;
    CostTotals totals;

    void recompute_totals() {
        totals = {};
        for (const auto& r : rows) {
            totals.params += r.params;
            totals.params_with_bn += r.params_with_bn;
            if (r.layer.rfind("classifier", 0) != 0) {
                totals.params_no_classifier += r.params;
                totals.params_with_bn_no_classifier += r.params_with_bn;
            }
            (r.is_compute() ? totals.compute_flops : totals.elementwise_flops) += r.flops;
            totals.flops += r.flops;
            totals.mac += r.mac;
        }
    }

    /// Rows merged by the first `depth` dot-separated components of their names.
    std::vector<CostRow> grouped(std::size_t depth) const {
        std::vector<CostRow> out;
        std::map<std::string, std::size_t> where;
        for (const auto& r : rows) {
            std::size_t pos = std::string::npos, from = 0;
            for (std::size_t i = 0; i < depth; ++i) {
                pos = r.layer.find('.', from);
                if (pos == std::string::npos) break;
                from = pos + 1;
            }
            std::string key = pos == std::string::npos ? r.layer : r.layer.substr(0, pos);
            auto [it, fresh] = where.try_emplace(key, out.size());
            if (fresh) {
                CostRow g;
                g.layer = key;
                g.kind = r.kind;
                out.push_back(g);
            }
            auto& g = out[it->second];
            g.params += r.params;
            g.params_with_bn += r.params_with_bn;
            g.flops += r.flops;
            g.mac += r.mac;
        }
        return out;
    }
};

namespace detail {
inline Count elements(const Shape& s) { return numel(s); }
}  // namespace detail

/// Per-op accounting from a shape trace.
inline CostRow cost_of(const TraceOp& op) {
    CostRow r;
    r.layer = op.name;
    r.kind = op.kind;
    r.params = op.weights + op.bias;
    r.params_with_bn = r.params + op.bn_params;
    Count in_elems = 0;
    for (const auto& s : op.inputs) in_elems += detail::elements(s);
    const Count out_elems = detail::elements(op.output);
    switch (op.kind) {
        case OpKind::Conv: {
            const Count cin = op.inputs.at(0).at(1);
            r.flops = out_elems * (cin / op.groups) * op.kernel_h * op.kernel_w;
            break;
        }
        case OpKind::FullyConnected: r.flops = op.inputs.at(0).at(0) * op.weights; break;
        case OpKind::Conv1dChannels: r.flops = out_elems * op.kernel_w; break;
        case OpKind::MaxPool:
        case OpKind::GlobalAvgPool: r.flops = in_elems; break;
        case OpKind::Concat: r.flops = 0; break;
        default: r.flops = out_elems; break;
    }
    r.mac = in_elems + out_elems + r.params_with_bn;
    return r;
}

template <Scalar T>
CostReport analyze_graph(const Module<T>& model, const Shape& input_shape, std::string name = {}) {
    if (input_shape.size() != 4) throw ShapeError("analyze_graph: input shape must be NCHW");
    Trace trace;
    model.trace(input_shape, "", trace);
    CostReport report;
    report.model = std::move(name);
    report.input = input_shape;
    report.rows.reserve(trace.size());
    for (const auto& op : trace) report.rows.push_back(cost_of(op));
    report.recompute_totals();
    return report;
}

namespace detail {
inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}
}  // namespace detail

inline std::string render_csv(const CostReport& report) {
    std::ostringstream os;
    os << "layer,params,params_with_bn,flops,mac\r\n";
    for (const auto& r : report.rows)
        os << detail::csv_field(r.layer) << ',' << r.params << ',' << r.params_with_bn << ',' << r.flops << ','
           << r.mac << "\r\n";
    return os.str();
}

/// RFC-4180 parser: quoted fields, doubled quotes, CRLF or LF line ends.
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"') {
            quoted = true;
            any = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
            any = true;
        } else if (c == '\r' || c == '\n') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            if (any || !field.empty()) {
                row.push_back(std::move(field));
                rows.push_back(std::move(row));
            }
            field.clear();
            row.clear();
            any = false;
        } else {
            field += c;
            any = true;
        }
    }
    if (quoted) throw Error("csv: unterminated quoted field");
    if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

/// Rebuilds report rows from render_csv output.
inline CostReport parse_cost_csv(const std::string& text) {
    auto rows = parse_csv(text);
    if (rows.empty() || rows[0] != std::vector<std::string>{"layer", "params", "params_with_bn", "flops", "mac"})
        throw Error("cost csv: unexpected header");
    CostReport report;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& f = rows[i];
        if (f.size() != 5) throw Error("cost csv: row " + std::to_string(i + 1) + " has " + std::to_string(f.size()) + " fields");
        CostRow r;
        r.layer = f[0];
        r.params = std::stoll(f[1]);
        r.params_with_bn = std::stoll(f[2]);
        r.flops = std::stoll(f[3]);
        r.mac = std::stoll(f[4]);
        report.rows.push_back(r);
    }
    report.recompute_totals();
    return report;
}

inline std::string format_count(Count v) {
    std::string s = std::to_string(v < 0 ? -v : v);
    for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
    return v < 0 ? "-" + s : s;
}

inline std::string render_text(const CostReport& report, std::size_t group_depth = 0) {
    const auto rows = group_depth ? report.grouped(group_depth) : report.rows;
    std::size_t width = 5;
    for (const auto& r : rows) width = std::max(width, r.layer.size());
    std::ostringstream os;
    os << "# model: " << (report.model.empty() ? "<unnamed>" : report.model) << "  input: " << to_string(report.input)
       << '\n';
    os << "# " << report.convention << '\n';
    auto line = [&](const std::string& name, Count p, Count pb, Count f, Count m) {
        os << std::left << std::setw(static_cast<int>(width)) << name << std::right << std::setw(16) << format_count(p)
           << std::setw(16) << format_count(pb) << std::setw(20) << format_count(f) << std::setw(20)
           << format_count(m) << '\n';
    };
    os << std::left << std::setw(static_cast<int>(width)) << "layer" << std::right << std::setw(16) << "params"
       << std::setw(16) << "params_with_bn" << std::setw(20) << "flops" << std::setw(20) << "mac" << '\n';
    for (const auto& r : rows) line(r.layer, r.params, r.params_with_bn, r.flops, r.mac);
    const auto& t = report.totals;
    line("total", t.params, t.params_with_bn, t.flops, t.mac);
    os << std::fixed << std::setprecision(4);
    os << "params (M):          " << static_cast<double>(t.params) / 1e6 << " with classifier, "
       << static_cast<double>(t.params_no_classifier) / 1e6 << " without\n";
    os << "params+BN (M):       " << static_cast<double>(t.params_with_bn) / 1e6 << " with classifier, "
       << static_cast<double>(t.params_with_bn_no_classifier) / 1e6 << " without\n";
    os << "GFLOP-units:         " << static_cast<double>(t.flops) / 1e9 << " (compute "
       << static_cast<double>(t.compute_flops) / 1e9 << " + elementwise "
       << static_cast<double>(t.elementwise_flops) / 1e9 << ")\n";
    os << "MAC (M elements):    " << static_cast<double>(t.mac) / 1e6 << '\n';
    return os.str();
}

}  // namespace treenet
