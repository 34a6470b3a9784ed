#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>

#include "fairnav/evaluate.hpp"

namespace fairnav {

namespace {

constexpr double kCanvas = 640.0;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
                                    "#e377c2", "#17becf", "#bcbd22", "#7f7f7f", "#393b79", "#637939"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  std::string s = buf;
  if (s == "-0.00") s = "0.00";
  return s;
}

struct Frame {
  double scale;
  double sx(double x) const { return x * scale; }
  double sy(double y) const { return kCanvas - y * scale; }  // world y points up
};

}  // namespace

std::string render_svg(const TraceFile& trace) {
  const Limits lim{trace.map_size};
  const Frame fr{kCanvas / trace.map_size};
  const double r = fr.sx(lim.robot_radius());

  std::map<int, std::vector<const TraceRecord*>> by_agent;
  for (const auto& rec : trace.records) by_agent[rec.agent].push_back(&rec);
  for (auto& [agent, recs] : by_agent) {
    std::stable_sort(recs.begin(), recs.end(),
                     [](const TraceRecord* a, const TraceRecord* b) { return a->t < b->t; });
  }

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(kCanvas) << "\" height=\""
     << num(kCanvas) << "\" viewBox=\"0 0 " << num(kCanvas) << ' ' << num(kCanvas) << "\">\n";
  os << "<rect x=\"0\" y=\"0\" width=\"" << num(kCanvas) << "\" height=\"" << num(kCanvas)
     << "\" fill=\"white\" stroke=\"black\"/>\n";

  os << "<g id=\"obstacles\" fill=\"#b0b0b0\">\n";
  for (const auto& c : trace.obstacles) {
    os << "<circle cx=\"" << num(fr.sx(c.cx)) << "\" cy=\"" << num(fr.sy(c.cy)) << "\" r=\""
       << num(fr.sx(c.radius)) << "\"/>\n";
  }
  os << "</g>\n";

  for (const auto& [agent, recs] : by_agent) {
    const char* color = kPalette[static_cast<std::size_t>(agent) % std::size(kPalette)];
    os << "<g id=\"agent-" << agent << "\">\n";

    if (static_cast<std::size_t>(agent) < trace.goals.size()) {
      const Vec2 g = trace.goals[static_cast<std::size_t>(agent)];
      os << "<circle class=\"goal-region\" cx=\"" << num(fr.sx(g.x)) << "\" cy=\"" << num(fr.sy(g.y))
         << "\" r=\"" << num(fr.sx(lim.goal_radius())) << "\" fill=\"none\" stroke=\"" << color
         << "\" stroke-dasharray=\"4 3\"/>\n";
      os << "<rect class=\"goal\" x=\"" << num(fr.sx(g.x) - 4) << "\" y=\"" << num(fr.sy(g.y) - 4)
         << "\" width=\"8\" height=\"8\" fill=\"" << color << "\"/>\n";
    }
    if (recs.empty()) {
      os << "</g>\n";
      continue;
    }

    const TraceRecord& first = *recs.front();
    os << "<circle class=\"start\" cx=\"" << num(fr.sx(first.x)) << "\" cy=\"" << num(fr.sy(first.y))
       << "\" r=\"" << num(r) << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";

    os << "<polyline class=\"trajectory\" fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < recs.size(); ++k) {
      if (k > 0) os << ' ';
      os << num(fr.sx(recs[k]->x)) << ',' << num(fr.sy(recs[k]->y));
    }
    os << "\"/>\n";

    for (const auto* rec : recs) {
      if (rec->f == 0) {
        os << "<circle class=\"stop\" cx=\"" << num(fr.sx(rec->x)) << "\" cy=\"" << num(fr.sy(rec->y))
           << "\" r=\"" << num(r) << "\" fill=\"#808080\" fill-opacity=\"0.5\"/>\n";
      }
    }

    const TraceRecord& last = *recs.back();
    const double x = fr.sx(last.x);
    const double y = fr.sy(last.y);
    const double s = std::max(r, 5.0);
    if (last.status == AgentStatus::crashed) {
      os << "<path class=\"crash\" d=\"M" << num(x - s) << ' ' << num(y - s) << " L" << num(x + s) << ' '
         << num(y + s) << " M" << num(x - s) << ' ' << num(y + s) << " L" << num(x + s) << ' '
         << num(y - s) << "\" stroke=\"black\" stroke-width=\"3\"/>\n";
    } else if (last.status == AgentStatus::active) {
      os << "<polygon class=\"timeout\" points=\"" << num(x) << ',' << num(y - s) << ' ' << num(x + s)
         << ',' << num(y + s) << ' ' << num(x - s) << ',' << num(y + s)
         << "\" fill=\"none\" stroke=\"black\" stroke-width=\"2\"/>\n";
    }
    os << "</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace fairnav
