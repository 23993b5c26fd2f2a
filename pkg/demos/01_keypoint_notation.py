"""Write a figure description as keypoints and see what the canonical form does.

Run: python3 demos/01_keypoint_notation.py
"""

from capgeo.keypoints import RELATIONS, parse_keypoint_document, serialize_keypoints

caption = """
# square ABCD with diagonals meeting at O
E: square CDAB
E: segment BD
E: segment CA
E: point O
R: intersection-point(O; AC; BD)
R: perpendicular(BD; AC)
N: length(segment BA) = 4 cm
N: angle(∠DOA) = 90°
"""

ks = parse_keypoint_document(caption)
print("canonical form:")
print(serialize_keypoints(ks))
print()
print("counts per dimension:", ks.counts())

# the same facts written differently land on the same set
again = parse_keypoint_document("""
E: square ABCD
E: DB
E: AC
E: O
R: perpendicular(segment AC; segment BD)
R: intersection point(point O; segment AC; segment BD)
N: length(AB) = 4 cm
N: angle-measure(angle AOD) = 90 degree
""")
print("rewritten caption gives the same set:", again == ks)

families = {}
for r in RELATIONS.values():
    families.setdefault(r.family.value, []).append(r.name)
print()
for family, names in families.items():
    print(f"{family:11s} {', '.join(names)}")
