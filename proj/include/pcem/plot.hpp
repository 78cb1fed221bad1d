#ifndef PCEM_PLOT_HPP
#define PCEM_PLOT_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcem/bootstrap.hpp"
#include "pcem/stepfn.hpp"

namespace pcem {

struct PlotCurve
{
    std::string label;
    std::string color;
    bool dashed = false;
    std::vector<double> x;
    std::vector<double> y;
};

struct PlotSpec
{
    std::string title;
    double x_lo = 0.0;
    double x_hi = 1.0;
    std::vector<PlotCurve> curves;
    std::optional<BootstrapBand> band;
};

namespace detail {

inline std::string fixed2(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

inline std::string label_number(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

inline std::string xml_escape(const std::string& s)
{
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

}  // namespace detail

// Vertices of the step function's graph over [lo, hi].
inline PlotCurve step_curve(const StepFunction& f, double lo, double hi, std::string label, std::string color)
{
    PlotCurve c{std::move(label), std::move(color), false, {}, {}};
    double v = f.eval(lo);
    c.x.push_back(lo);
    c.y.push_back(v);
    for (std::size_t k = 0; k < f.size(); ++k) {
        const double t = f.jump_times()[k];
        if (t <= lo) continue;
        if (t > hi) break;
        c.x.push_back(t);
        c.y.push_back(v);
        v = f.cum_values()[k];
        c.x.push_back(t);
        c.y.push_back(v);
    }
    c.x.push_back(hi);
    c.y.push_back(v);
    return c;
}

template <class F>
PlotCurve sampled_curve(const F& fn, double lo, double hi, std::size_t points, std::string label, std::string color)
{
    PlotCurve c{std::move(label), std::move(color), true, {}, {}};
    for (std::size_t k = 0; k < points; ++k) {
        const double t = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(points - 1);
        c.x.push_back(t);
        c.y.push_back(fn(t));
    }
    return c;
}

// Standalone 800x500 SVG document. Output depends only on the spec.
inline std::string render_svg(const PlotSpec& spec)
{
    if (!(spec.x_lo < spec.x_hi)) throw std::invalid_argument("render_svg: empty x range");
    const double W = 800, H = 500, left = 70, right = 170, top = 40, bottom = 50;
    const double pw = W - left - right, ph = H - top - bottom;

    double y_max = 0.0;
    for (const auto& c : spec.curves)
        for (double v : c.y) y_max = std::max(y_max, v);
    if (spec.band)
        for (double v : spec.band->upper) y_max = std::max(y_max, v);
    if (!(y_max > 0.0) || !std::isfinite(y_max)) y_max = 1.0;
    y_max *= 1.05;

    auto sx = [&](double x) { return left + (x - spec.x_lo) / (spec.x_hi - spec.x_lo) * pw; };
    auto sy = [&](double y) { return top + ph - y / y_max * ph; };
    auto pt = [&](double x, double y) { return detail::fixed2(sx(x)) + "," + detail::fixed2(sy(y)); };

    std::ostringstream o;
    o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"500\" viewBox=\"0 0 800 500\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"800\" height=\"500\" fill=\"white\"/>\n"
      << "<text x=\"" << detail::fixed2(left) << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">"
      << detail::xml_escape(spec.title) << "</text>\n";

    // Axes with ticks; the outer x ticks are the window bounds.
    o << "<g stroke=\"black\" stroke-width=\"1\" fill=\"none\">\n"
      << "<line x1=\"" << detail::fixed2(left) << "\" y1=\"" << detail::fixed2(top + ph) << "\" x2=\""
      << detail::fixed2(left + pw) << "\" y2=\"" << detail::fixed2(top + ph) << "\"/>\n"
      << "<line x1=\"" << detail::fixed2(left) << "\" y1=\"" << detail::fixed2(top) << "\" x2=\""
      << detail::fixed2(left) << "\" y2=\"" << detail::fixed2(top + ph) << "\"/>\n"
      << "</g>\n<g font-family=\"sans-serif\" font-size=\"11\">\n";
    for (int k = 0; k <= 5; ++k) {
        const double x = spec.x_lo + (spec.x_hi - spec.x_lo) * k / 5.0;
        o << "<line x1=\"" << detail::fixed2(sx(x)) << "\" y1=\"" << detail::fixed2(top + ph) << "\" x2=\""
          << detail::fixed2(sx(x)) << "\" y2=\"" << detail::fixed2(top + ph + 5) << "\" stroke=\"black\"/>\n"
          << "<text x=\"" << detail::fixed2(sx(x)) << "\" y=\"" << detail::fixed2(top + ph + 18)
          << "\" text-anchor=\"middle\">" << detail::label_number(x) << "</text>\n";
        const double y = y_max * k / 5.0;
        o << "<line x1=\"" << detail::fixed2(left - 5) << "\" y1=\"" << detail::fixed2(sy(y)) << "\" x2=\""
          << detail::fixed2(left) << "\" y2=\"" << detail::fixed2(sy(y)) << "\" stroke=\"black\"/>\n"
          << "<text x=\"" << detail::fixed2(left - 8) << "\" y=\"" << detail::fixed2(sy(y) + 4)
          << "\" text-anchor=\"end\">" << detail::label_number(y) << "</text>\n";
    }
    o << "<text x=\"" << detail::fixed2(left + pw / 2) << "\" y=\"" << detail::fixed2(H - 10)
      << "\" text-anchor=\"middle\">time</text>\n"
      << "<text x=\"18\" y=\"" << detail::fixed2(top + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << detail::fixed2(top + ph / 2) << ")\">mean function</text>\n</g>\n";

    if (spec.band && !spec.band->grid.empty()) {
        const auto& b = *spec.band;
        o << "<polygon fill=\"#9ecae1\" fill-opacity=\"0.5\" stroke=\"none\" points=\"";
        for (std::size_t g = 0; g < b.grid.size(); ++g) o << (g ? " " : "") << pt(b.grid[g], b.upper[g]);
        for (std::size_t g = b.grid.size(); g-- > 0;) o << " " << pt(b.grid[g], b.lower[g]);
        o << "\"/>\n";
    }
    for (const auto& c : spec.curves) {
        o << "<polyline fill=\"none\" stroke=\"" << detail::xml_escape(c.color) << "\" stroke-width=\"2\""
          << (c.dashed ? " stroke-dasharray=\"6,4\"" : "") << " points=\"";
        for (std::size_t k = 0; k < c.x.size(); ++k) o << (k ? " " : "") << pt(c.x[k], c.y[k]);
        o << "\"/>\n";
    }

    // Legend.
    double ly = top + 10;
    o << "<g font-family=\"sans-serif\" font-size=\"12\">\n";
    if (spec.band) {
        o << "<rect x=\"" << detail::fixed2(W - right + 15) << "\" y=\"" << detail::fixed2(ly - 8)
          << "\" width=\"20\" height=\"10\" fill=\"#9ecae1\" fill-opacity=\"0.5\"/>\n"
          << "<text x=\"" << detail::fixed2(W - right + 42) << "\" y=\"" << detail::fixed2(ly + 1) << "\">"
          << detail::label_number(100.0 * spec.band->level) << "% band</text>\n";
        ly += 20;
    }
    for (const auto& c : spec.curves) {
        o << "<line x1=\"" << detail::fixed2(W - right + 15) << "\" y1=\"" << detail::fixed2(ly - 3) << "\" x2=\""
          << detail::fixed2(W - right + 35) << "\" y2=\"" << detail::fixed2(ly - 3) << "\" stroke=\""
          << detail::xml_escape(c.color) << "\" stroke-width=\"2\"" << (c.dashed ? " stroke-dasharray=\"6,4\"" : "")
          << "/>\n<text x=\"" << detail::fixed2(W - right + 42) << "\" y=\"" << detail::fixed2(ly + 1) << "\">"
          << detail::xml_escape(c.label) << "</text>\n";
        ly += 20;
    }
    o << "</g>\n</svg>\n";
    return o.str();
}

}  // namespace pcem

#endif  // PCEM_PLOT_HPP
