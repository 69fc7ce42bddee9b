"""Directed link vectors: directions, lengths, and positional classes.

Roads are modeled as directed 2-D segments.  Besides length and heading,
any ordered pair of non-parallel links falls into one of four positional
classes depending on where their infinite extensions meet, measured from
each link's start point (forward vs backward side).
"""

import math

from roadflow.geometry import LinkSet, LinkVector, Point2, classify_positional, link_direction, link_length

east = LinkVector(0, Point2(0, 0), Point2(100, 0))
north = LinkVector(1, Point2(100, 0), Point2(100, 80))
south_far = LinkVector(2, Point2(300, 50), Point2(300, -20))

print("east  : length %.1f m, direction %.1f deg" % (link_length(east), math.degrees(link_direction(east))))
print("north : length %.1f m, direction %.1f deg" % (link_length(north), math.degrees(link_direction(north))))

for a, b in [(east, north), (east, south_far), (north, south_far)]:
    print(f"classify({a.id}, {b.id}) -> {classify_positional(a, b).name}")

# connectivity snaps coincident end/start points
links = LinkSet([east, north, LinkVector(2, Point2(100, 80), Point2(0, 80))])
print("connectivity:", sorted(links.connectivity))
