#pragma once

#include <string>

#include "ebench/explain.hpp"

namespace ebench::render {

// One line per non-zero contribution, largest |phi| first, with a +/- marker.
std::string force_text(const explain::ForceData& force);

// Static force bar: red segments push the output up, blue segments push it
// down. With no contributions only the base marker is drawn.
std::string force_svg(const explain::ForceData& force);

}  // namespace ebench::render
