/* C interface to the uniheap persistent object heap. */
#ifndef UNIHEAP_H
#define UNIHEAP_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define UH_OK 0
#define UH_CONFLICT 1
#define UH_INVALID (-1)

/* Type tags. Values travel as a tag plus the sign-extended 64-bit pattern. */
#define UH_CHAR 1
#define UH_SHORT 2
#define UH_INT 3
#define UH_LONG 4
#define UH_FLOAT 5
#define UH_DOUBLE 6
#define UH_REFERENCE 7

typedef struct UhSession UhSession;
typedef struct UhTx UhTx;

typedef size_t (*UhVrootsFn)(void *ctx, uint64_t *buf, size_t cap);
typedef void (*UhRelocatedFn)(void *ctx, const uint64_t *old_ids, const uint64_t *new_ids, size_t n);

int uh_create(const char *path, uint64_t size, const char *name, int force, UhSession **out_session);
int uh_open(const char *path, int read_only, UhSession **out_session);
int uh_close(UhSession *s);

int uh_init_plass(const UhSession *s, const char *name, const char *const *field_names,
                  const uint8_t *field_types, size_t n, uint32_t *out_id);
int uh_exists_plass(const UhSession *s, const char *name, uint32_t *out_id);

int uh_atomic_begin(const UhSession *s, UhTx **out_tx);
int uh_atomic_end(UhTx *tx); /* UH_OK or UH_CONFLICT; frees tx */
int uh_abort(UhTx *tx);      /* frees tx */
int uh_alloc_obj(UhTx *tx, uint32_t plass_id, int is_array, uint64_t array_length, uint64_t *out_ref);
int uh_write_field(UhTx *tx, uint64_t obj, uint64_t index, uint8_t tag, uint64_t bits);
int uh_read_field(const UhSession *s, UhTx *tx_or_null, uint64_t obj, uint64_t index,
                  uint8_t *out_tag, uint64_t *out_bits);
int uh_write_field_atomic(const UhSession *s, uint64_t obj, uint64_t index, uint8_t tag, uint64_t bits);

int uh_set_root(const UhSession *s, const char *name, uint64_t obj);
int uh_get_root(const UhSession *s, const char *name, uint64_t *out_ref);

int uh_register_runtime(const UhSession *s, UhVrootsFn vroots, UhRelocatedFn relocated, void *ctx,
                        uint64_t *out_id);
int uh_unregister_runtime(const UhSession *s, uint64_t id);
int uh_request_gc(const UhSession *s, uint64_t *out_live);

int uh_fence_count(const UhSession *s, uint64_t *out_n);
int uh_map_type(const char *language, const char *foreign_type, uint8_t *out_tag);
const char *uh_last_error(void);

#ifdef __cplusplus
}
#endif

#endif
